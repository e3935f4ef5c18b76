use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward already ran on this tape; record a new graph first")]
    BackwardConsumed,
    #[error("backward root must hold a single element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tensor container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
