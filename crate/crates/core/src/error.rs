use thiserror::Error;

/// Errors produced by the bridging framework.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid noise-schedule parameters.
    #[error("invalid schedule configuration: {0}")]
    Schedule(String),

    /// A caller broke an operation's shape or range contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model, bridge or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Checkpoint could not be decoded or failed its integrity check.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss or intermediate value became NaN or infinite.
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    /// Numerical breakdown in a linear-algebra routine.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
