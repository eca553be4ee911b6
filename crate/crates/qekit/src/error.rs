use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shapes or lengths do not line up.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// A file (JSONL record, binary header, ...) violates its documented format.
    /// `line` is 1-based; 0 means the error is not tied to a line.
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    /// sparsemax is nondifferentiable here: some off-support entry sits within
    /// 1e-9 of the support threshold. Callers perturb the input and retry.
    #[error("sparsemax support boundary at index {0}; perturb the input and retry")]
    Boundary(usize),

    /// Gold labels cannot support the requested objective (constant scores for
    /// a rank correlation, single-class tags for MCC).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The run configuration is inconsistent with the requested operation.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
