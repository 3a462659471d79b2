use std::path::PathBuf;

use thermopost_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    NonConvergence(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes of the command-line front end.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const IO: u8 = 1;
    pub const VALIDATION: u8 = 2;
    pub const RESOURCE: u8 = 3;
    pub const NON_CONVERGENCE: u8 = 4;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(CoreError::Resource { .. }) | Error::Core(CoreError::SizeGuard { .. }) => exit::RESOURCE,
            Error::Core(CoreError::Regularization(_)) | Error::NonConvergence(_) => exit::NON_CONVERGENCE,
            Error::Core(_) | Error::Config(_) => exit::VALIDATION,
            Error::Io { .. } | Error::Format { .. } => exit::IO,
        }
    }
}
