use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch (expected {expected:?}, found {found:?})")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {found}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("division by zero at node {node}")]
    DivisionByZero { node: usize },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;
