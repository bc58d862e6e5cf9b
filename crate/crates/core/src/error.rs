//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or invalid arguments caught before any compute.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or layer shapes do not chain.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed input file (dataset, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    /// A contract of an operation was violated at call time.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training diverged or produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A verification suite (gradient check, comparison) reported failures.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 config, 2 runtime, 3 failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::CheckFailed(_) => 3,
            _ => 2,
        }
    }
}
