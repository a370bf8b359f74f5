use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(f64),
    #[error("state within {distance:e} of primary P{primary}")]
    Singularity { primary: u8, distance: f64 },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("step budget exhausted at t = {t}")]
    MaxSteps { t: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian (condition ratio {ratio:e})")]
    SingularJacobian { ratio: f64 },
    #[error("extrapolation did not converge: {0}")]
    Extrapolation(String),
    #[error("Melnikov basis is identically zero at this order")]
    IdenticallyZero,
    #[error("half-period symmetry condition {condition} violated (residual {residual:e})")]
    SymmetryViolation { condition: usize, residual: f64 },
    #[error("target period {target} not bracketed by [{lo}, {hi}]")]
    PeriodNotBracketed { target: f64, lo: f64, hi: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
