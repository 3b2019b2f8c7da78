use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside the admissible interval [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("oracle evaluation failed: {0}")]
    Oracle(String),

    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("integration diverged at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("non-finite integrand at t = {t}")]
    Singularity { t: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(t: f64, lo: f64, hi: f64) -> Self {
        Error::Domain { t, lo, hi }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}

/// Fails with a domain error unless `t` lies in `[lo, hi]`.
pub(crate) fn check_time(t: f64, lo: f64, hi: f64) -> Result<()> {
    if t.is_finite() && t >= lo && t <= hi {
        Ok(())
    } else {
        Err(Error::domain(t, lo, hi))
    }
}
