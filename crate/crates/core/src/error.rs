use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("no trainable parameters")]
    NoTrainableParameters,

    #[error("gradient alignment error: {0}")]
    Alignment(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("rank mismatch: naive averaging requires equal ranks, got {0:?}")]
    RankMismatch(Vec<usize>),

    #[error("frozen parameter `{0}` was modified")]
    FreezeViolation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// True for errors caused by invalid user-supplied configuration or
    /// inputs, as opposed to failures during a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Parse { .. }
                | Error::EmptyDataset
                | Error::Validation(_)
                | Error::Stratification(_)
                | Error::Partition(_)
                | Error::Rank(_)
                | Error::RankMismatch(_)
        )
    }
}
