use epiflow_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("point behind camera (depth {depth})")]
    PointBehindCamera { depth: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("ground-truth mask is empty")]
    EmptyMask,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("scene coverage {fraction:.3} is below the required minimum")]
    CoverageTooLow { fraction: f64 },
    #[error("non-finite loss at step {step} (scene {scene})")]
    NonFiniteLoss { step: usize, scene: usize },
    #[error("malformed camera file, line {line}: {msg}")]
    MalformedCameraFile { line: usize, msg: String },
    #[error("malformed header at byte {offset}: {msg}")]
    MalformedHeader { offset: usize, msg: String },
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn degenerate(msg: impl Into<String>) -> Error {
    Error::DegenerateConfiguration(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
