use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{table} lookup out of range: id {id} >= size {size}")]
    Lookup {
        table: &'static str,
        id: u64,
        size: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    Fingerprint { expected: u64, found: u64 },

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("integer overflow in {0}")]
    Overflow(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// `2` config/schema, `3` numerical abort, `4` fingerprint or stale
    /// cache, `1` anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::Json(_) => 2,
            Error::Numerical(_) => 3,
            Error::Fingerprint { .. } | Error::StaleCache(_) => 4,
            _ => 1,
        }
    }
}
