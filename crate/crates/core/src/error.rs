use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite state at step {step}, path {path}")]
    NonFinite { step: usize, path: usize },

    #[error("regression failed at step {step}: {reason}")]
    Regression { step: usize, reason: String },

    #[error("quadrature produced a non-finite value: {0}")]
    Quadrature(String),

    #[error("transformed value {value} at step {step} leaves the tabulated range")]
    TransformRange { step: usize, value: f64 },

    #[error("stability condition violated: {0}")]
    Stability(String),

    #[error("finite-difference field became non-finite at time step {step}")]
    PdeNonFinite { step: usize },
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Domain(msg.into()))
}
