use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("attribute index {index} out of range for domain with {width} attributes")]
    AttributeOutOfRange { index: usize, width: usize },

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("row {row} is invalid: {reason}")]
    InvalidRow { row: usize, reason: String },

    #[error("workload is empty")]
    EmptyWorkload,

    #[error("requested {requested} distinct queries but only {available} exist")]
    WorkloadTooLarge { requested: usize, available: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("privacy budget exhausted: requested {requested:.6e}, remaining {remaining:.6e}")]
    BudgetExhausted { requested: f64, remaining: f64 },

    #[error("model component over attributes {attrs:?} has {cells} cells, above the cap of {cap}")]
    ComponentTooLarge {
        attrs: Vec<usize>,
        cells: u128,
        cap: u128,
    },

    #[error("mismatched shares: {0}")]
    ShareMismatch(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
