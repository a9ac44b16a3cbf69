use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A precondition on the call itself was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A function evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),
    /// Stored state no longer satisfies its structural invariant.
    #[error("integrity error: {0}")]
    Integrity(String),
    /// A numerical routine could not proceed (e.g. rank deficiency).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
