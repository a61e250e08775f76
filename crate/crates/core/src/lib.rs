//! Entropy-gated tile classification of painting images: canvas-density
//! normalisation, salient tile extraction, a small CNN trained from scratch,
//! per-pixel probability maps and image-level evaluation.

pub mod cnn;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod imaging;
pub mod inference;
pub mod seed;
pub mod synth;
pub mod tiling;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
