use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("evader history is empty")]
    EmptyHistory,
    #[error("timestamps must be strictly increasing ({prev} then {next})")]
    NonMonotonicTime { prev: f64, next: f64 },
    #[error("set is empty: {0}")]
    EmptySet(String),
    #[error("terminal controller: quadcopter is directly over the vehicle")]
    DegenerateDirection,
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("linear program failed: {0}")]
    Lp(String),
    #[error("reference horizon {horizon} s exceeds segment duration {segment} s")]
    HorizonExceedsSegment { horizon: f64, segment: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
