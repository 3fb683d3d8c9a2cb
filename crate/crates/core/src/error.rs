use std::path::PathBuf;

use crate::types::{ArmKey, ItemId, QueryId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("arm {0} has not been initialized")]
    UnknownArm(ArmKey),

    #[error("item {item} is not in the match set of query {query}")]
    ForeignItem { query: QueryId, item: ItemId },

    /// Corrupted, truncated or version-mismatched binary stream.
    #[error("load error: {0}")]
    Load(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O failure on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
