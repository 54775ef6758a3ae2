use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("empty tensor with shape {shape:?}")]
    Empty { shape: Vec<usize> },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("invalid range: lo {lo} must be below hi {hi}")]
    Range { lo: f64, hi: f64 },
    #[error("index {index} out of bounds for length {len}")]
    Index { index: usize, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("reverse pass already ran on this tape")]
    BackwardTwice,
    #[error("reverse pass on an empty tape")]
    EmptyTape,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid bitwidth {0}; expected one of 2, 4, 8, 16, 32")]
    Bitwidth(u32),
    #[error("stochastic gate sampling requested in eval mode")]
    EvalMode,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
