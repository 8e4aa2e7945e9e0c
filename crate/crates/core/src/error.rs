use std::path::PathBuf;

use thiserror::Error;

use crate::types::TrajectoryStep;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    TrainingFailure { epoch: usize, message: String },
    /// Carries the trajectory recorded up to the failing step.
    #[error("non-finite objective at step {step}")]
    NumericalFailure { step: usize, trajectory: Vec<TrajectoryStep> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png error in {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, used in structured error output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidMask(_) => "invalid_mask",
            Error::InvalidImage(_) => "invalid_image",
            Error::Rejected(_) => "rejected",
            Error::Unsupported(_) => "unsupported",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::TrainingFailure { .. } => "training_failure",
            Error::NumericalFailure { .. } => "numerical_failure",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::Io { .. } => "io",
            Error::Png { .. } => "png",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
