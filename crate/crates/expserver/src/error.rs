use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("response log {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("response log {path}, line {line}: {message}")]
    Log {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T, E = ExpError> = std::result::Result<T, E>;
