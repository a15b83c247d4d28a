use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CicmeError {
    /// Malformed graph, shape or dataset layout.
    #[error("structural error: {0}")]
    Structural(String),

    /// An argument outside its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Non-finite values or overflow in a numerical routine.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CicmeError>;

impl CicmeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CicmeError::Io {
            path: path.into(),
            source,
        }
    }
}
