use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed panel: {0}")]
    Panel(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("ingestion failed: {0}")]
    Ingest(String),

    #[error("visit index {k} out of range 1..={max}")]
    VisitOutOfRange { k: usize, max: usize },

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("intervention error: {0}")]
    Intervention(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the input data rather than by usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
