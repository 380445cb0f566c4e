use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or contradictory configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A call that violates an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed checkpoint, CSV or config file contents.
    #[error("format error: {0}")]
    Format(String),
    /// A loss, ratio or gradient became NaN or infinite.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
