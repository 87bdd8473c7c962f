use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fairboard_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing upstream artifact {}: run `fairboard {stage}` first", path.display())]
    MissingUpstream { stage: &'static str, path: PathBuf },
    #[error("no ground truth for patient(s) {0}")]
    MissingGroundTruth(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
