use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state budget exceeded: enumeration needs {needed} states, cap is {cap}")]
    BudgetExceeded { needed: u128, cap: usize },

    #[error("discount must lie in (0, 1), got {0}")]
    InvalidDiscount(f64),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty action set")]
    EmptyActions,

    #[error("sequence {index} does not end in end-of-sequence")]
    MissingEos { index: usize },

    #[error("state {0} is not enumerated")]
    UnknownState(String),

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("action sequence of length {len} exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },

    #[error("context length must be at least 2, got {0}")]
    ContextTooShort(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize, dump: String },

    #[error("malformed record at line {line}: {msg}")]
    Malformed { line: usize, msg: String },

    #[error("vocabulary overflow: {0}")]
    VocabOverflow(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("enumeration hash mismatch: checkpoint has {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 internal, 2 usage or input, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::NonConvergence { .. } => 3,
            Error::UnknownState(_) | Error::Mismatch(_) => 1,
            _ => 2,
        }
    }
}
