use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("dimensions overflow: {0}")]
    DimensionOverflow(String),

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("{count} trailing bytes after payload")]
    TrailingBytes { count: usize },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("label {label} at pixel {index} exceeds class count {classes}")]
    LabelRange { label: u32, index: usize, classes: usize },

    #[error("invalid cube: {0}")]
    InvalidCube(String),

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("prototype for class {class:?} spans {found} bands, cube has {expected}")]
    PrototypeBands { class: String, expected: usize, found: usize },

    #[error("class id {id} out of range 1..={classes}")]
    ClassRange { id: usize, classes: usize },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("gradient missing for parameter {0:?}")]
    MissingGrad(String),

    #[error("non-finite gradient for sample {sample}")]
    NonFiniteGradient { sample: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("adversarial sample {sample} left the eps-ball (deviation {deviation}, eps {eps})")]
    BallViolation { sample: usize, deviation: f64, eps: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint does not match run config: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    /// True for errors caused by user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::CheckpointMismatch(_))
    }
}
