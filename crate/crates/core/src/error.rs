use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty loss: {0}")]
    EmptyLoss(String),

    #[error("WKT syntax error at byte {offset}: {message}")]
    Wkt { offset: usize, message: String },

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite loss at step {step} (batch {batch_id})")]
    NonFiniteLoss { step: u64, batch_id: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint incompatible with model configuration; missing: {missing:?}, unexpected: {unexpected:?}")]
    IncompatibleCheckpoint {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::File {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors that indicate a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_) | Error::TapeConsumed)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
