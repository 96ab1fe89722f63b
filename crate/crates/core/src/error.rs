use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("ingestion error at line {line}: {message}")]
    Ingest { line: usize, message: String },

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("storage error: {0}")]
    Storage(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
