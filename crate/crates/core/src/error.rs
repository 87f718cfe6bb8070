use thiserror::Error;

/// Errors raised by the model, solvers and estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("quadrature did not converge: {0}")]
    NoConvergence(String),
    #[error("separatrix state: energy {energy} lies within {tol} of the critical level {critical}")]
    Separatrix { energy: f64, critical: f64, tol: f64 },
    #[error("trapped orbit unsupported here (rho = {rho})")]
    TrappedOrbit { rho: f64 },
    #[error("two-branch regime unsupported (rho' = {rho}, threshold {threshold})")]
    TwoBranch { rho: f64, threshold: f64 },
    #[error("rejection sampler exceeded {0} iterations")]
    RejectionCap(usize),
    #[error("thinning majorant {majorant} below the actual rate {rate}")]
    MajorantViolation { majorant: f64, rate: f64 },
    #[error("flow integration failed: {0}")]
    StepControl(String),
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("series diverged: {0}")]
    Divergence(String),
    #[error("probe rejected: {0}")]
    ProbeRejected(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
