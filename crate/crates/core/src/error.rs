use thiserror::Error;

#[derive(Debug, Error)]
pub enum StedrError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("positivity violation: {0}")]
    PositivityViolation(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    #[error("drug {drug} is ineligible: {reason}")]
    IneligibleDrug { drug: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, StedrError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(StedrError::InvalidArgument(msg.into()))
}
