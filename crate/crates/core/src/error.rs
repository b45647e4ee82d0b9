use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("backward called without a recorded forward pass: {0}")]
    NoForward(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask registry fingerprint mismatch: {expected:016x} vs {actual:016x}")]
    FingerprintMismatch { expected: u64, actual: u64 },

    #[error("cosine similarity undefined for an all-zero mask")]
    EmptyMask,

    #[error(
        "target sparsity {target} unreachable: {required} prune calls needed at rate {rate}, \
         schedule allows {available}"
    )]
    UnreachableSparsity {
        target: f64,
        rate: f64,
        required: usize,
        available: usize,
    },

    #[error("budget exceeded: {requested} steps requested, {remaining} remaining")]
    BudgetExceeded { requested: u64, remaining: u64 },

    #[error("non-finite loss at step {step}")]
    NumericFailure { step: u64 },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
