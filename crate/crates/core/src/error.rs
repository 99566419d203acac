//! Error type shared across the crate.
//!
//! Variants map onto process exit codes at the CLI boundary: configuration
//! problems exit 2, file / format problems exit 3, everything else that
//! reaches main (numerical failures, failed verification) exits 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Batch statistics undefined (for example BatchNorm over a single value).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("backward requires a scalar loss, got {0}")]
    NotScalar(String),

    #[error("tape already consumed by backward")]
    TapeConsumed,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("too few frames: {0}")]
    TooFewFrames(String),

    #[error("config error: {0}")]
    ConfigError(String),

    #[error("format error: {0}")]
    FormatError(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("empty evaluation")]
    EmptyEvaluation,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error at the CLI boundary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigError(_) | Error::InvalidHyperparameter(_) => 2,
            Error::Io(_) | Error::FormatError(_) | Error::CorruptFile(_) => 3,
            _ => 1,
        }
    }
}
