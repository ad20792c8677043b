//! Crate-wide error type.
//!
//! Config/validation/precondition failures and numeric failures are kept
//! apart because the CLI maps them to different exit codes (2 and 3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; the message names the offending key.
    #[error("config: {0}")]
    Config(String),

    /// Malformed file contents; the message names the offending field.
    #[error("format: {0}")]
    Format(String),

    /// An operation precondition does not hold for the given inputs.
    #[error("precondition: {0}")]
    Precondition(String),

    /// A numeric operation produced NaN/Inf or otherwise diverged.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
