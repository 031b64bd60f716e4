use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Dimension {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("dataset too small: {total} steps, need at least {needed}")]
    DatasetTooSmall { total: usize, needed: usize },

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("loss undefined: {0}")]
    Loss(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("embedding training failed: {0}")]
    Embedding(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap with step context while propagating through the forward pass.
    pub fn with_context(self, ctx: &str) -> Error {
        match self {
            Error::Dimension { context, lhs, rhs } => Error::Dimension {
                context: format!("{ctx}: {context}"),
                lhs,
                rhs,
            },
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            other => other,
        }
    }

    pub fn dimension(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::Dimension {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
