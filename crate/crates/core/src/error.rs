use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, lengths or parameter values that violate an operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    /// A file could not be read, parsed or validated.
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// A byte buffer does not hold a valid container.
    #[error("malformed data: {0}")]
    Format(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
