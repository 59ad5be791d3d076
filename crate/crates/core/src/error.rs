use thiserror::Error;

use crate::model::ScaleTag;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the set of values an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// A spectrum container carries the wrong scale tag for the operation.
    #[error("scale error: expected {expected} scale, found {found}")]
    Scale { expected: ScaleTag, found: ScaleTag },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("state error: {0}")]
    State(String),

    #[error("initialization error: {0}")]
    Initialization(String),

    /// Stored artifacts failed a length or checksum check.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("artifact schema version {found} is not supported (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },

    /// A predecessor stage was produced from a different configuration.
    #[error("stale artifacts: {0}")]
    Stale(String),

    /// A predecessor stage has not been run.
    #[error("missing artifacts: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn scale(expected: ScaleTag, found: ScaleTag) -> Self {
        Error::Scale { expected, found }
    }

    /// True for failures caused by damaged or incompatible stored artifacts.
    pub fn is_integrity(&self) -> bool {
        matches!(self, Error::Integrity(_) | Error::SchemaVersion { .. })
    }
}
