use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated (bad shape, axis, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Exhaustive enumeration was requested on an instance that is too large.
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
