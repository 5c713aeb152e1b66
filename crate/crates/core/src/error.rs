use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its block's preconditions.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// An API precondition was violated by the caller (index range, shape).
    #[error("usage error: {0}")]
    Usage(String),

    /// A checkpoint or data file is missing, malformed, or incompatible.
    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Error::Usage(message.into())
    }

    pub fn artifact(message: impl Into<String>) -> Self {
        Error::Artifact(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Usage(_) => 2,
            Error::Artifact(_) | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}
