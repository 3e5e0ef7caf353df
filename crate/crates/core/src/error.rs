use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument values outside an operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor or grid dimensions that do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Bad or inconsistent configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A forward operation produced NaN or infinity (debug builds only).
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents are malformed.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line tool: 2 config, 3 I/O, 4 shape.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Shape(_) => 4,
            Error::NonFinite(_) => 1,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidInput(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use invalid;
pub(crate) use shape_err;
