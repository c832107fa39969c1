use thiserror::Error;

use crate::graph::EdgeId;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum CmsError {
    /// Malformed or inconsistent user input.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("unknown edge id {0}")]
    UnknownEdge(EdgeId),

    /// A state handed to an operation does not satisfy its precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A map sent a point outside the part it is declared to land in.
    #[error("system integrity violated: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CmsError> = std::result::Result<T, E>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CmsError::Input(msg.into()))
}
