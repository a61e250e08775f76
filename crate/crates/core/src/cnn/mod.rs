//! Minimal tensor core and the two tile-classifier architectures.

pub mod arch;
pub mod bundle;
pub mod network;
pub mod ops;
pub mod tensor;

pub use arch::{ArchitectureSpec, ConvLayerSpec, NamedTensor, Parameters, Variant, DEFAULT_INPUT_SIDE};
pub use network::{forward, forward_with, loss_and_gradients, Gradients, Network, Workspace};
pub use tensor::Tensor;
