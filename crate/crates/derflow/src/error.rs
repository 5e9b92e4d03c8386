//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("network: {0}")]
    Network(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("quadratic program is not convex: curvature {curvature:.3e} along a probe direction")]
    IndefiniteHessian {
        curvature: f64,
        /// Direction z with z'Hz < 0, for diagnosis.
        direction: Vec<f64>,
    },

    #[error("equality constraints are inconsistent: least-squares residual {residual:.3e}")]
    InconsistentEqualities {
        residual: f64,
        /// Residual vector A z* - b of the least-squares point, a witness
        /// that no exact solution exists.
        witness: Vec<f64>,
    },

    #[error("solver failed: {0}")]
    SolverFailure(String),

    #[error("problem is infeasible: {0}")]
    Infeasible(String),

    #[error(
        "inverter at bus {bus} cannot host the declared supply peak: \
         worst-case active power {peak:.6} MW exceeds apparent capacity {capacity:.6} MVA"
    )]
    SupplyExceedsCapacity { bus: usize, peak: f64, capacity: f64 },

    #[error("disturbance support is unbounded or the support program failed: {0}")]
    UnboundedSupport(String),

    #[error(
        "fast-scale disturbance law leaves the slow per-period support; \
         cannot certify constraint satisfaction ({0})"
    )]
    FastSupportViolation(String),

    #[error("policy file: {0}")]
    PolicyFormat(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
