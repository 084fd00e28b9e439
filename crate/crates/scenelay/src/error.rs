//! Crate-wide error type.
//!
//! Shape mismatches inside the numeric kernels are programmer errors and
//! panic via `assert!`; everything driven by input data or configuration
//! surfaces as an [`Error`].

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("embedding file {path} contains no parseable entries")]
    EmptyEmbeddingFile { path: PathBuf },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("image dimensions must be positive, got {w}x{h}")]
    BadImageDims { w: f64, h: f64 },

    #[error("precomputed store has no vector for caption id {0:?}")]
    MissingCaptionId(String),

    #[error("caption has no in-vocabulary tokens")]
    AllTokensOov,

    #[error("non-finite loss in batch {batch_index}")]
    NonFiniteLoss { batch_index: usize },

    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("metric undefined: {0}")]
    DegenerateMetric(String),

    #[error("audit sample size {n} exceeds dataset size {len}")]
    SampleTooLarge { n: usize, len: usize },

    #[error("checkpoint {path}: {msg}")]
    BadCheckpoint { path: PathBuf, msg: String },

    #[error("{0}")]
    Msg(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
