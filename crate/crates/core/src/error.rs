use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A constructor or function argument is outside its documented domain.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// A step index past the end of a schedule.
    #[error("step {step} is outside the schedule (total steps {total})")]
    OutOfRange { step: u64, total: u64 },

    /// Vector or matrix lengths do not agree.
    #[error("shape mismatch for `{what}`: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A point that should lie on the minimizer manifold does not.
    #[error("point is {distance:e} away from the minimizer manifold (tolerance {tol:e})")]
    OffManifold { distance: f64, tol: f64 },

    /// A NaN or infinity appeared during training.
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },

    /// Numerical integration of a slow SDE could not continue.
    #[error("SDE integration failed at t = {time}: {reason}")]
    Integration { time: f64, reason: String },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerics rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Integration { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_shape(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            got,
        })
    }
}
