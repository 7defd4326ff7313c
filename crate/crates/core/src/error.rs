use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("sentence too long: {got} tokens (limit {limit})")]
    SentenceTooLong { got: usize, limit: usize },
    #[error("batch size {requested} exceeds corpus size {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("sequence too long: {got} positions (limit {limit})")]
    SequenceTooLong { got: usize, limit: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("bag of words is empty")]
    EmptyBag,
    #[error("no prompt tokens available")]
    EmptyPrompts,
    #[error("sentence has no annotated entity spans")]
    NoEntities,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
