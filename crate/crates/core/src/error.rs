//! Error type shared across the crate.
//!
//! The CLI maps each category to a distinct exit code, so everything that can
//! fail reports which contract was violated: configuration, data on disk,
//! call-site usage, or tensor dimensions.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Corpus files missing, malformed, or inconsistent with the manifest.
    #[error("data error: {0}")]
    Data(String),

    /// An operation was called outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Tensor shapes do not line up.
    #[error("dimension error: {0}")]
    Dim(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code used by the CLI: 2 config, 3 data/io, 4 usage/dimension.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Usage(_) | Error::Dim(_) => 4,
        }
    }
}
