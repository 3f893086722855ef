use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Incompatible extents; `detail` names the offending axes.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A precondition on how an operation is used was violated.
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

impl TensorError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
