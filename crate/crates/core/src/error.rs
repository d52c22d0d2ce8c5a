use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    /// Training produced a non-finite state.
    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    /// Reverse pass produced a non-finite adjoint.
    #[error("non-finite adjoint at step {step}")]
    NonFiniteAdjoint { step: usize },

    #[error("checkpoint for step {step} is missing")]
    MissingCheckpoint { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("budget violation: {0}")]
    Budget(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            what,
            expected,
            got,
        }
    }
}

pub(crate) fn ensure_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(what, expected, got))
    }
}
