use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("expected {expected} answers, got {got}")]
    AnswerCount { expected: usize, got: usize },
    #[error("feature dimension mismatch for {id}: expected {expected}, got {got}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("invalid record {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("duplicate id {0}")]
    Duplicate(String),
    #[error("unknown {kind} id {id}")]
    Unknown { kind: &'static str, id: String },
    #[error("index needs at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error("k={k} exceeds the {available} available neighbors")]
    KTooLarge { k: usize, available: usize },
    #[error("insufficient same-split neighbors for questions: {}", .0.join(", "))]
    InsufficientNeighbors(alloc::vec::Vec<String>),
    #[error("task {task_id} is {status}, expected {expected}")]
    TaskState {
        task_id: String,
        status: &'static str,
        expected: &'static str,
    },
    #[error("image {image_id} is not a candidate of task {task_id}")]
    NotACandidate { task_id: String, image_id: String },
    #[error("answer round for task {0} already has 10 answers")]
    RoundComplete(String),
    #[error("{0} tasks still pending")]
    PendingTasks(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("missing prediction for instance {0}")]
    MissingPrediction(String),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model is missing: {0}")]
    MissingModel(&'static str),
}
