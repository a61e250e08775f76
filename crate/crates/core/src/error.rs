use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("density required: `{0}` has no pixels-per-cm value")]
    DensityRequired(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("duplicate id `{id}` on manifest lines {first_line} and {line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        line: usize,
    },

    #[error("images smaller than the {side}px tile side: {}", offenders.join(", "))]
    ImagesTooSmall { side: u32, offenders: Vec<String> },

    #[error("nothing to balance: {0}")]
    NothingToBalance(String),

    #[error(
        "class balance unreachable below overlap {cap}: best ratio {best_ratio:.3} at overlap {best_overlap}"
    )]
    BalanceUnreachable {
        cap: f64,
        best_overlap: f64,
        best_ratio: f64,
    },

    #[error("insufficient pool: requested {requested} images, {available} available")]
    InsufficientPool { requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {0} outside {{0, 1}}")]
    InvalidLabel(f32),

    #[error("training set contains a single class")]
    SingleClass,

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f32 },

    #[error("image `{0}` not analyzable at this tile size: no salient tiles")]
    NotAnalyzable(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate regression: all x values are equal")]
    DegenerateFit,

    #[error("model file {path}: {message}")]
    ModelFormat { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InsufficientPool { .. } | Error::NothingToBalance(_) => {
                ErrorCategory::Config
            }
            Error::NonFinite { .. }
            | Error::DegenerateFit
            | Error::BalanceUnreachable { .. }
            | Error::Shape(_) => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
