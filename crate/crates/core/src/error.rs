use alloc::string::String;
use alloc::vec::Vec;

/// Errors surfaced by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{context}: input must not be empty")]
    EmptyInput { context: &'static str },
    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("registry already holds an entry for client {client} task {task}")]
    DuplicateEntry { client: usize, task: usize },
    #[error("registry is missing an entry for client {client} task {task}")]
    MissingEntry { client: usize, task: usize },
    #[error("{0}")]
    Invalid(String),
}
