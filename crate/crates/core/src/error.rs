use thiserror::Error;

use crate::trainer::MetricsRecord;

/// Errors produced by the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("capacity exceeded: {count} enumerable responses per prompt (limit {limit})")]
    Capacity { count: u128, limit: u128 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A training step produced a non-finite gradient or policy; the
    /// diagnostic record describes the state at the failing step.
    #[error("training aborted at step {step}: {reason}")]
    Aborted {
        step: u64,
        reason: String,
        record: Box<MetricsRecord>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
