use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("landmark {index} out of range: ({x}, {y}) not in [0,1]")]
    LandmarkOutOfRange { index: usize, x: f64, y: f64 },

    #[error("expected {expected} landmarks, got {got}")]
    LandmarkCount { expected: usize, got: usize },

    #[error("left and right eye centroids coincide; inter-ocular distance is zero")]
    ZeroInterOcular,

    #[error("invalid landmark subset: {0}")]
    InvalidSubset(String),

    #[error("degenerate face polygon: {0}")]
    DegeneratePolygon(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing file {}: {what}", path.display())]
    MissingFile { path: PathBuf, what: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite loss `{term}` at step {step} (batch hash {batch_hash})")]
    NonFiniteLoss {
        step: u64,
        term: String,
        batch_hash: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Stable short tag printed before error messages.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::LandmarkOutOfRange { .. } | Error::LandmarkCount { .. } | Error::ZeroInterOcular => "landmarks",
            Error::InvalidSubset(_) => "subset",
            Error::DegeneratePolygon(_) => "mask",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::Parse { .. } => "parse",
            Error::MissingFile { .. } => "missing-file",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::NonFiniteLoss { .. } => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::NotPsd { .. } => "not-psd",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
        }
    }
}
