//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("inertia matrix is singular or not positive definite")]
    SingularInertia,
    #[error("tangential velocity is degenerate (|v_t| < 1e-12)")]
    DegenerateTangential,
    #[error("constraint normal vanishes at the query point")]
    ZeroNormal,
    #[error("stick mode infeasible: multiplier {value:.3e} below zero")]
    StickInfeasible { value: f64 },
    #[error("contract violation: {0}")]
    ContractError(String),
    #[error("event cap of {0} exceeded (possible Zeno behavior)")]
    MaxEventsExceeded(usize),
    #[error("root finding failed to converge: {0}")]
    NonconvergedRootfind(String),
    #[error("Newton iteration diverged (residual {residual:.3e} at homotopy sigma {sigma:.3e})")]
    NewtonDiverged { residual: f64, sigma: f64 },
    #[error("switch-aligned step failed; element left unaligned")]
    StepAlignmentFailed,
    #[error("clock horizon infeasible: s_max * T_numeric < T")]
    InfeasibleClock,
    #[error("homotopy stalled at sigma {sigma:.3e}: {reason}")]
    HomotopyStalled { sigma: f64, reason: String },
    #[error("maximum iterations reached")]
    MaxIter,
    #[error("line search failed to make progress")]
    LineSearchFailure,
    #[error("KKT system singular after inertia correction attempts")]
    SingularKKT,
    #[error("linear algebra failure: {0}")]
    Linear(#[from] crate::diffkit::DiffError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
