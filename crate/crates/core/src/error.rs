use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite component at index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty vector")]
    Empty,

    #[error("need at least 2 tasks, got {0}")]
    TooFewTasks(usize),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid loss for task {task}: {value}")]
    InvalidLoss { task: usize, value: f64 },

    #[error("task {0} recorded no losses this epoch")]
    MissingTaskLoss(usize),

    #[error("epoch {epoch} is outside the schedule range [0, {end})")]
    EpochOutOfRange { epoch: usize, end: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("unknown task {0}")]
    UnknownTask(usize),

    #[error("non-finite value in forward pass at {0}")]
    ForwardNaN(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid metric: {0}")]
    InvalidMetric(String),

    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("{0}")]
    Usage(String),

    #[error("summary mismatch: {0}")]
    SummaryMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
