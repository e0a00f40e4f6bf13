use thiserror::Error;

/// Errors raised by the tensor engine, normalization layers, data I/O and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("graph state error: {0}")]
    State(String),
    #[error("batch too small: {op} needs at least {needed} samples, got {got}")]
    BatchSize {
        op: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("unknown domain index {index} (model has {count} domains)")]
    Domain { index: usize, count: usize },
    #[error("assignment constraint violated: {0}")]
    Constraint(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed file at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
