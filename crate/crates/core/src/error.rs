use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty support: no valid position in softmax row")]
    EmptySupport,
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("causality violated: key {j} is after query {i}")]
    Causality { i: usize, j: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible needle packing: {0}")]
    InfeasiblePacking(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("no rotary channels: {0}")]
    NoRotaryChannels(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
