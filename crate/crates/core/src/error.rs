//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (shape mismatch, out-of-range
    /// parameter, capacity overflow).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration is internally inconsistent or degenerate.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training or adaptation produced a non-finite quantity.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn divergence(msg: impl Into<String>) -> Self {
        Error::Divergence(msg.into())
    }
}
