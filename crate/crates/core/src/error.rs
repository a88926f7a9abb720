use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DfaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DfaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid detection: {0}")]
    DetectionInvalid(String),

    #[error("duplicate media path in manifest: {0}")]
    DuplicatePath(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("encoder weights are not initialized")]
    UninitializedEncoder,

    #[error("checkpoint is missing required parameters: {}", .0.join(", "))]
    MissingParameters(Vec<String>),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient samples: requested {requested} per class, available real={real} fake={fake}")]
    InsufficientSamples {
        requested: usize,
        real: usize,
        fake: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DfaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DfaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            DfaError::InvalidArgument(_) => "invalid_argument",
            DfaError::DetectionInvalid(_) => "detection_invalid",
            DfaError::DuplicatePath(_) => "duplicate_path",
            DfaError::Shape(_) => "shape",
            DfaError::UninitializedEncoder => "uninitialized_encoder",
            DfaError::MissingParameters(_) => "missing_parameters",
            DfaError::ShapeMismatch { .. } => "shape_mismatch",
            DfaError::Config(_) => "config",
            DfaError::NonFinite(_) => "non_finite",
            DfaError::UndefinedMetric(_) => "undefined_metric",
            DfaError::Data(_) => "data",
            DfaError::InsufficientSamples { .. } => "insufficient_samples",
            DfaError::Io { .. } => "io",
            DfaError::Tensor(_) => "tensor",
            DfaError::Json(_) => "json",
            DfaError::Image(_) => "image",
            DfaError::Csv(_) => "csv",
        }
    }
}
