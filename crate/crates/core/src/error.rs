use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or grid shapes disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// Unknown task, split, backbone, or an inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Annotation requests arrived out of order.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// A task's scripted expert is failing too often to be trusted.
    #[error("expert failure: {0}")]
    Expert(String),

    #[error("goal already complete")]
    Done,

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
