use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PpouError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PpouError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("parse error at row {row}, column `{column}`: {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },

    #[error("model file format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PpouError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PpouError::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        PpouError::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        PpouError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PpouError::Io {
            path: path.into(),
            source,
        }
    }
}
