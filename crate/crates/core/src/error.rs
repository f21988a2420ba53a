use crate::geometry::BoundingBox;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate or non-finite box {0:?}")]
    InvalidBox(BoundingBox),
    #[error("average precision is undefined for a class without ground truth")]
    UndefinedAp,
    #[error("no class has any ground truth instance")]
    NoGroundTruth,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Input(String),
    #[error("inconsistent NMS outcome: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
