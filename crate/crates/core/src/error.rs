//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QmixError {
    /// Caller-supplied value violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Too few points to fit a mixture model; callers fall back per class.
    #[error("mixture fit underdetermined: {0}")]
    FitUnderdetermined(String),

    /// Training diverged (non-finite loss) or an internal contract broke.
    #[error("training aborted: {0}")]
    TrainingAborted(String),

    /// Malformed manifest, checkpoint, or log file.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl QmixError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        QmixError::InvalidInput(msg.into())
    }
}
