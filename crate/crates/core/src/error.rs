use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's shape or argument contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value became NaN or infinite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed input data: labels out of range, corrupted files, and so on.
    #[error("data error at byte {offset}: {message}")]
    Data { offset: u64, message: String },

    #[error("data error: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn data_at(offset: u64, msg: impl Into<String>) -> Self {
        Error::Data {
            offset,
            message: msg.into(),
        }
    }
}
