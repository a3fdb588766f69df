use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),

    #[error("unknown manual id `{0}`")]
    UnknownManual(String),

    #[error("manual `{manual}`: {what} indices are not contiguous 1..M (found {found} at position {position})")]
    NonContiguousIndex {
        manual: String,
        what: &'static str,
        found: usize,
        position: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("embedding file: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("embedding file truncated: {0}")]
    Truncated(String),

    #[error("embedding dimension must be positive, got {0}")]
    InvalidDim(u32),

    #[error("embedding `{id}`: expected {expected} values, got {got}")]
    DimMismatch { id: String, expected: usize, got: usize },

    #[error("embedding `{0}` contains a non-finite value")]
    NonFinite(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("id `{0}` is longer than 65535 bytes")]
    IdTooLong(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
