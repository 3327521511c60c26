use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    Shape { op: &'static str, reason: String },

    /// An operation was configured with parameters that cannot produce a valid output.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The finite-difference oracle could not produce a trustworthy answer.
    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("parameter `{name}`: {reason}")]
    Param { name: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub fn shape(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            reason: reason.into(),
        }
    }

    pub fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
