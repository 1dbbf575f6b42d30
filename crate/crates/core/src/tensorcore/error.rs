use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{op} on out-of-domain operand (checked mode)")]
    Domain { op: &'static str },
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("gradient target is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("tensor is not recorded on a tape")]
    Untracked,
    #[error("graph already released; re-run forward or pass retain_graph")]
    GraphReleased,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
