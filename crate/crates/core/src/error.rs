use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("no valid flow correspondences")]
    EmptyCorrespondence,

    #[error("no valid pixels to evaluate")]
    EmptyMask,

    #[error("camera path collides with scene geometry at frame {frame} (clearance {clearance:.4} m)")]
    Collision { frame: usize, clearance: f64 },

    #[error("flow requires an analytic static scene: {0}")]
    Flow(String),

    #[error("non-finite loss, gradient or update at step {step}")]
    NonFinite { step: usize },

    #[error("predictor failed on window {ordinal}: {source}")]
    Predictor {
        ordinal: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
