use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no flows")]
    NoFlows,

    #[error("invalid binning: window {window_s}s / bin {bin_s}s is not a positive integer")]
    InvalidBinning { window_s: f64, bin_s: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("expected 2×240 features, got {0}")]
    FeatureShape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fewer than {required} distinct classes available (have {available})")]
    NotEnoughClasses { required: usize, available: usize },

    #[error("OL requires tune split")]
    MissingOodPool,

    #[error("training diverged at step {step} (epoch {epoch}): loss = {loss}")]
    Diverged { step: usize, epoch: usize, loss: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("video {0} already in gallery, use replace_centroids")]
    DuplicateClass(String),

    #[error("video {0} not in gallery")]
    UnknownClass(String),

    #[error("AP undefined: no positive detections")]
    NoPositives,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("out-of-distribution set overlaps known classes: {0}")]
    OodOverlap(String),

    #[error("not enough shots for {video_id}: requested {requested}, available {available}")]
    InsufficientShots {
        video_id: String,
        requested: usize,
        available: usize,
    },

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("{0}")]
    Invalid(String),

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

    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
