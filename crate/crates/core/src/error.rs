use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// An argument lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// A reduction had nothing to reduce over.
    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("output pixel ({x}, {y}) is not covered by any crop")]
    Coverage { x: usize, y: usize },

    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("voxel {0} is not active in the grid")]
    UnknownVoxel(String),

    /// Bad configuration key or value.
    #[error("configuration: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::File {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by numerically invalid arguments rather than
    /// by malformed or missing input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::EmptyDomain(_) | Error::DegenerateFeature(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
