use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite entry at index {index} while constructing {what}")]
    NonFinite { what: &'static str, index: usize },

    #[error("SVD failed to converge for a {rows}x{cols} matrix")]
    SvdNoConvergence { rows: usize, cols: usize },

    #[error("invalid partitioning: {0}")]
    InvalidPartition(String),

    #[error("node index {k} out of range 1..={nodes}")]
    NodeOutOfRange { k: usize, nodes: usize },

    /// A closed-form operator was requested for a task whose local blocks are
    /// not broad and full rank.
    #[error("closed-form precondition violated: {0}; use iterative mode")]
    ClosedFormPrecondition(String),

    #[error("protocol error in round {round}: {reason}")]
    Protocol { round: usize, reason: String },

    #[error("config error in field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
