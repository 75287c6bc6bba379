use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Arrival load at or beyond the service rate of the selected branch.
    #[error("stability violated: load {load} tasks/s against service rate {rate} tasks/s")]
    StabilityViolation { load: f64, rate: f64 },

    #[error("cannot project an empty vector")]
    EmptyVector,

    #[error("target level {target} outside bracket [{low}, {high}]")]
    BracketError { target: f64, low: f64, high: f64 },

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("instance too large for exhaustive search: {items} items (cap {cap})")]
    TooLarge { items: usize, cap: usize },

    #[error("line search exhausted after {0} contractions")]
    LineSearchExhausted(u32),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unstable queue configuration: load {load} tasks/s, service rate {rate} tasks/s")]
    UnstableConfig { load: f64, rate: f64 },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
