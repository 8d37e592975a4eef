use thiserror::Error;

/// Errors raised by the assimilation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("covariance is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error(
        "model state became non-finite at step {step} of sub-interval starting at t = {t_start}"
    )]
    BlowUp { step: usize, t_start: f64 },

    #[error("model blow-up on sub-interval {index}: {source}")]
    SubIntervalBlowUp {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint does not belong to this {0}")]
    CheckpointMismatch(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
