//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter `{name}` has no gradient")]
    MissingGrad { name: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("checkpoint format version mismatch: file has `{found}`, this build reads `{expected}`")]
    CheckpointVersion { found: String, expected: String },
    #[error("checkpoint checksum mismatch: payload is corrupted")]
    ChecksumMismatch,
    #[error("checkpoint shape mismatch for `{name}`: manifest says {manifest:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        manifest: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint holds tensors unknown to the model: {names:?}")]
    UnknownTensors { names: Vec<String> },
    #[error("checkpoint is missing tensors required by the model: {names:?}")]
    MissingTensors { names: Vec<String> },
    #[error("non-finite {level} loss at epoch {epoch}, step {step}; training aborted")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        level: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
