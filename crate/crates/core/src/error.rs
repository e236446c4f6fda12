use thiserror::Error;

/// Errors surfaced by every part of the crate.
#[derive(Debug, Error)]
pub enum GtrError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GtrError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GtrError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        GtrError::Contract(msg.into())
    }

    /// Process exit code: 2 for I/O and file-format failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            GtrError::Io(_) | GtrError::Format { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = GtrError> = std::result::Result<T, E>;
