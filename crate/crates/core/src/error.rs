use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient timesteps: need {required}, have {available}")]
    InsufficientTimesteps { required: usize, available: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("noise step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("degenerate range: observations are constant ({value})")]
    DegenerateRange { value: f64 },

    #[error("all-zero observations: normalizing denominator is zero")]
    AllZeroObservations,

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("truncated series in {}: header declares {declared} frames, found {found}", path.display())]
    TruncatedSeries {
        path: PathBuf,
        declared: usize,
        found: usize,
    },

    #[error("alignment error for patch {patch}: {message}")]
    Alignment { patch: String, message: String },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),

    #[error("missing ensemble for patch {0}")]
    MissingEnsemble(String),

    #[error("unknown patch {0}")]
    UnknownPatch(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
