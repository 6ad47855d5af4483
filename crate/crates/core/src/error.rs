use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported format version {0}")]
    FormatVersion(u32),
    #[error("{what}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: String, row: usize },
    #[error("label {value} at row {row} is not in {{0, 1}}")]
    InvalidLabel { row: usize, value: u8 },
    #[error("subset id {value} at row {row} is outside [1, {subsets}]")]
    InvalidSubset { row: usize, value: u16, subsets: usize },
    #[error("subset {0} has no samples")]
    EmptySubset(usize),
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no samples are accepted at threshold {threshold}")]
    NoAcceptedSamples { threshold: f64 },
    #[error("degenerate split: {wrong} wrong out of {total} samples")]
    DegenerateSplit { wrong: usize, total: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
