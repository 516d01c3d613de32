use std::path::PathBuf;

use idhnet_stats::StatsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bundle {path}: missing sequence file {file}")]
    MissingSequence { path: PathBuf, file: String },
    #[error("corrupt bundle {path}: {reason}")]
    CorruptBundle { path: PathBuf, reason: String },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("duplicate case id {0}")]
    DuplicateCase(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("tumor does not fit inside the volume: {0}")]
    TumorOutOfBounds(String),
    #[error("failed to write {path}: {source}")]
    WriteError { path: PathBuf, source: std::io::Error },
    #[error("failed to read {path}: {source}")]
    ReadError { path: PathBuf, source: std::io::Error },
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("cannot stratify: {0}")]
    Stratification(String),
    #[error("case {0} has no label")]
    MissingLabel(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn read(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::ReadError { path: path.into(), source }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::WriteError { path: path.into(), source }
    }
}
