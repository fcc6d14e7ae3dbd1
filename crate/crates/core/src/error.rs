//! Error type shared across the crate.
//!
//! The CLI maps each variant to a stable process exit code, so library code
//! should pick the variant by *cause*: bad user input is `Config`, broken
//! bytes on disk are `Format`, and anything that went numerically sideways
//! (non-finite values, degenerate norms) is `Numeric`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or precondition violation (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// Non-finite values or degenerate numeric state (exit code 3).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed input files (exit code 4).
    #[error("format error: {0}")]
    Format(String),
    /// Underlying I/O failure (exit code 4).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Format(_) | Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn numeric_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Numeric(msg.into()))
}

pub(crate) fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}
