use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// A caller broke an operation's precondition (shapes, ranks, ranges).
    #[error("contract violation: {0}")]
    Contract(String),
    /// An operation produced NaN or infinity.
    #[error("numeric fault in {op}: non-finite value")]
    Numeric { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Contract(msg.into()))
}
