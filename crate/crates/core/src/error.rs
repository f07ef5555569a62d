use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TsgError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("training aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TsgError {
    /// Configuration problems map to a distinct process exit code in the CLI.
    pub fn is_config(&self) -> bool {
        matches!(self, TsgError::Config(_))
    }
}

pub type Result<T, E = TsgError> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> TsgError {
    TsgError::Dimension(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> TsgError {
    TsgError::Config(msg.into())
}
