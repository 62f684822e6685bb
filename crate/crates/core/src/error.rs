use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error in {file} at byte {offset}: {message}")]
    Parse {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("missing file {0}")]
    Missing(PathBuf),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            op,
            axis,
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
