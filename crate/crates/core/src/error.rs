use std::path::PathBuf;

use thiserror::Error;

use crate::dataframe::DomainKey;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("sample {key}: {reason}")]
    Sample { key: DomainKey, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("split: {0}")]
    Split(String),

    #[error("discrepancy: {0}")]
    Discrepancy(String),

    #[error("mixer: {0}")]
    Shape(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
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
            Error::Io { .. }
            | Error::Manifest(_)
            | Error::Sample { .. }
            | Error::Split(_)
            | Error::Shape(_) => 2,
            Error::Discrepancy(_) | Error::NonFiniteActivation { .. } | Error::Numerical(_) => 3,
        }
    }
}
