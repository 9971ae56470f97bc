use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("numeric fault in {0}")]
    Numeric(String),

    #[error("checkpoint error (format version {version}): {message}")]
    Checkpoint { version: String, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
