use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mergelab_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn stage(stage: &str, message: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
