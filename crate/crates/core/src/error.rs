use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing manifest: {}", .0.display())]
    MissingManifest(PathBuf),

    #[error("missing image for `{id}`: {}", path.display())]
    MissingImage { id: String, path: PathBuf },

    #[error("image/label count mismatch: {images} images on disk, {labels} manifest rows")]
    CountMismatch { images: usize, labels: usize },

    #[error("unreadable image {}: {reason}", path.display())]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("non-finite label for `{0}`")]
    NonFiniteLabel(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("split `{0}` would be empty")]
    EmptySplit(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown modality transform `{0}`")]
    UnknownTransform(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("degenerate crop: {0}")]
    DegenerateCrop(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("training aborted at epoch {epoch}, step {step}: non-finite {term}")]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        term: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
