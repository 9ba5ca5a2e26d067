use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate sampling distribution: {0}")]
    DegenerateDistribution(String),
    #[error("empty elite set: {0}")]
    EliteEmpty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
