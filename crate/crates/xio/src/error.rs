use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::idx::IdxError;

#[derive(Debug, Error)]
pub enum XioError {
    #[error(transparent)]
    Core(#[from] advland_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Idx {
        path: PathBuf,
        #[source]
        source: IdxError,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl XioError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XioError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            XioError::Core(_) => "core",
            XioError::Io { .. } => "io",
            XioError::Idx { .. } => "idx",
            XioError::Checkpoint(_) => "checkpoint",
            XioError::Config(_) => "config",
            XioError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = XioError> = std::result::Result<T, E>;
