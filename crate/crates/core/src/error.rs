//! Error type shared by every analysis stage.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: not a single-file volume (found {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDtype(i16),
    #[error("truncated file: expected {expected} data bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("label {0} is not in the label map")]
    UnknownLabel(i64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("both masks are empty")]
    BothEmpty,
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("too few values: need {needed}, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("empty group: {0}")]
    EmptyGroup(String),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("unknown level {level:?} for column {column}")]
    UnknownLevel { column: String, level: String },
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error("need at least {needed} models, got {got}")]
    InsufficientModels { needed: usize, got: usize },
    #[error("invalid weights: {0}")]
    BadWeights(String),
    #[error("need at least 2 studies, got {0}")]
    TooFewStudies(usize),
    #[error("need more points than neighbours: {got} points for {neighbors} neighbours")]
    TooFewPoints { got: usize, neighbors: usize },
    #[error("performance column {0:?} must not enter the feature space")]
    CircularFeature(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
