//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by model construction, training and prediction.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed inconsistent shapes, indices or option values.
    #[error("argument error: {0}")]
    Argument(String),

    /// A value object is in an invalid state (e.g. non-positive parameter).
    #[error("state error: {0}")]
    State(String),

    /// The requested operation is not supported for this configuration.
    #[error("capability error: {0}")]
    Capability(String),

    /// Numerical failure (Cholesky breakdown, non-finite objective, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// File / parsing problem; carries context such as a line number.
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code convention: 2 argument, 3 i/o, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::State(_) | Error::Capability(_) => 2,
            Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
