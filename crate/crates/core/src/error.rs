use thiserror::Error;

/// Errors raised by the numerical layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid argument: wrong shape, out-of-range parameter, kind mismatch.
    #[error("argument error: {0}")]
    Argument(String),
    /// Input data not usable (NaN values, non-extendable fields).
    #[error("data error: {0}")]
    Data(String),
    /// A documented precondition does not hold.
    #[error("precondition failed: {0}")]
    Precondition(String),
    /// A factorization or eigensolve failed.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// An iteration failed to contract.
    #[error("divergence: {0}")]
    Divergence(String),
    /// Flow map lost invertibility or an inverse-map iteration stalled.
    #[error("degeneracy: {0}")]
    Degeneracy(String),
    /// The grid cannot resolve the requested construction.
    #[error("resolution error: {0}")]
    Resolution(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
