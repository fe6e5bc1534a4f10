//! Error type shared by all simulator modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("inverted interval: start {start} > end {end}")]
    InvertedInterval { start: f64, end: f64 },

    #[error("timepoint out of range: {value} not in [0, 1]")]
    TimepointOutOfRange { value: f64 },

    #[error("{context}: input must be nonempty")]
    EmptyInput { context: &'static str },

    #[error("distribution entry {index} is negative ({value})")]
    NegativeMass { index: usize, value: f64 },

    #[error("distribution sums to {sum}, expected 1 within {tolerance}")]
    MassNotNormalized { sum: f64, tolerance: f64 },

    #[error("all class counts are zero; cannot normalize without smoothing")]
    ZeroTotalCount,

    #[error("distribution entry {index} must be strictly positive (got {value})")]
    NonPositiveMass { index: usize, value: f64 },

    #[error("class mix puts mass {mass} on infeasible temporal class {class}")]
    InfeasibleClassMass { class: usize, mass: f64 },

    #[error("cannot partition {n_samples} samples across {num_clients} clients")]
    TooManyClients {
        num_clients: usize,
        n_samples: usize,
    },

    #[error("parameter layouts differ: digest {left:#x} vs {right:#x}")]
    LayoutMismatch { left: u64, right: u64 },

    #[error(
        "feature dimension mismatch: model expects {expected}, sample {sample_id} has {found}"
    )]
    DimensionMismatch {
        expected: usize,
        found: usize,
        sample_id: u64,
    },

    #[error("prediction/ground-truth count mismatch: {predictions} vs {ground_truths}")]
    CountMismatch {
        predictions: usize,
        ground_truths: usize,
    },

    #[error("aggregation weights sum to {sum}, expected 1 within 1e-9")]
    WeightSumViolation { sum: f64 },

    #[error("score for client {client_id} is not finite")]
    NonFiniteScore { client_id: usize },

    #[error("training diverged: non-finite parameter after epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("training diverged on client {client_id} in round {round}: {source}")]
    ClientDivergence {
        round: usize,
        client_id: usize,
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed input at line {line}: {message}")]
    MalformedInput { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
