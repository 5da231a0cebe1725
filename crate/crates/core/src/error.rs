//! Error types shared across the library.

use std::path::PathBuf;
use thiserror::Error;

/// Unified error type for all library operations.
#[derive(Debug, Error)]
pub enum IguaneError {
    /// File system or stream failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Input violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Input is syntactically valid but numerically unusable
    /// (e.g. non-positive brain median, equal histogram landmarks).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Operation called on a volume in the wrong intensity space.
    #[error("state error: {0}")]
    State(String),

    /// Tensor or volume dimensions incompatible with the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An image cannot be cropped to the target dimensions without
    /// removing anatomy; such images are excluded from the pipeline.
    #[error("exclusion: {0}")]
    Exclusion(String),

    /// External preprocessing tool failed.
    #[error("tool adapter error: {0}")]
    Adapter(String),

    /// Malformed configuration file or inconsistent settings.
    #[error("config error: {0}")]
    Config(String),

    /// Not enough data to run a training or evaluation step.
    #[error("data error: {0}")]
    Data(String),

    /// A statistic is mathematically undefined for the given input
    /// (zero variance, all-zero differences, |r| = 1, ...).
    #[error("undefined result: {0}")]
    UndefinedResult(String),

    /// Checkpoint contents do not match their recorded hash or format.
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
}

impl IguaneError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IguaneError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, IguaneError>;
