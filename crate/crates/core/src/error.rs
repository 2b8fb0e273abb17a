use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a domain invariant.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    /// A task-loss oracle call failed; `subset` is the frame subset it was given.
    #[error("oracle failed on subset {subset:?}: {source}")]
    Oracle {
        subset: Vec<usize>,
        #[source]
        source: BackendError,
    },

    #[error("stage {stage} aborted at step {step}: {message}")]
    Training { stage: u8, step: usize, message: String },

    #[error("malformed agent response: {0}")]
    AgentResponse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures that originate in an external model or service.
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend(_) | Error::Oracle { .. })
    }
}
