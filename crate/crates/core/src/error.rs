//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CvsError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("stability condition violated: lambda^2 = {lambda_sq:.6e} exceeds bound {bound:.6e}")]
    StabilityCondition { lambda_sq: f64, bound: f64 },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("front degenerate: |d/dx1 Psi| = {value:.6e} below kappa_min = {kappa_min:.6e}")]
    FrontDegenerate { value: f64, kappa_min: f64 },

    #[error("CFL violation: number {number:.4} exceeds limit {limit:.4}")]
    Cfl { number: f64, limit: f64 },

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("iteration diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, CvsError>;

impl From<std::io::Error> for CvsError {
    fn from(e: std::io::Error) -> Self {
        CvsError::Io(e.to_string())
    }
}
