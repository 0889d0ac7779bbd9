use clast_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClastError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("loss term `{term}` is not finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<crate::model::checkpoint::Checkpoint>,
    },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl ClastError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ClastError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClastError>;
