use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library. Each variant maps onto one CLI exit class.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numerical error in {component}: {message}")]
    Numerical { component: String, message: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn numerical(component: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numerical {
            component: component.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }

    /// Short machine-readable class name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Dimension(_) => "dimension",
            Error::Numerical { .. } => "numerical",
            Error::Index(_) => "index",
            Error::UndefinedCorrelation(_) => "correlation",
            Error::Io { .. } => "io",
        }
    }
}
