use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive semi-definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveSemiDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    Asymmetric { asymmetry: f64 },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("triangular factor is singular (diagonal entry {value:.3e} at index {index})")]
    SingularFactor { index: usize, value: f64 },

    #[error("innovation factor is singular at timestep {index}")]
    SingularInnovation { index: usize },

    #[error("filtered covariance is singular at time {time}")]
    SingularFilteredCovariance { time: f64 },

    #[error("integration diverged (non-finite state) at time {time}")]
    DivergedIntegration { time: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("query time {time} lies outside [{start}, {end}]")]
    QueryOutOfSpan { time: f64, start: f64, end: f64 },

    #[error("line {line}: times must be strictly increasing")]
    NonMonotoneTimes { line: usize },

    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow { line: usize, expected: usize, found: usize },

    #[error("line {line}, column {column}: cannot parse {cell:?}")]
    UnparseableCell { line: usize, column: usize, cell: String },

    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },

    #[error("gradient check failed for `{parameter}`: relative error {error:.3e} exceeds {tolerance:.0e}")]
    GradientMismatch { parameter: String, error: f64, tolerance: f64 },

    #[error("predictions and ground truth do not line up: {0}")]
    Misaligned(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveSemiDefinite { .. }
                | Error::SingularFactor { .. }
                | Error::SingularInnovation { .. }
                | Error::SingularFilteredCovariance { .. }
                | Error::DivergedIntegration { .. }
                | Error::NonFiniteLoss { .. }
                | Error::GradientMismatch { .. }
        )
    }
}
