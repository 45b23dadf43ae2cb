use std::io;

use thiserror::Error;

/// Errors produced anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("task mismatch: expected {expected}, found {found}")]
    TaskMismatch { expected: &'static str, found: &'static str },

    #[error("protocol error [{code}]: {detail}")]
    Protocol { code: String, detail: String },

    #[error("partial round: received {received} of {expected} agents ({reason})")]
    PartialRound { received: usize, expected: usize, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("transport error: {0}")]
    Transport(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn protocol(code: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Protocol { code: code.into(), detail: detail.into() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Parse(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
