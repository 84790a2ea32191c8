use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("order parameters outside the analytic domain: {0}")]
    AnalyticDomain(String),

    #[error("no subset of size {k} has positive probability (ground set {n}, numerical rank {rank})")]
    InfeasibleSize { k: usize, n: usize, rank: usize },

    #[error("ground set of {n} elements is too large for enumeration (max {max})")]
    EnumerationTooLarge { n: usize, max: usize },

    #[error("outside theorem hypothesis: {0}")]
    TheoremDomain(String),

    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error("no records to emit")]
    EmptyRecords,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
