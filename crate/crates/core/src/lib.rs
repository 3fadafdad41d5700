//! Trajectory optimization for hybrid (discrete + continuous) control.
//!
//! The crate implements an iLQG-style differential dynamic programming
//! optimizer with hard control limits enforced by a projected-Newton box QP,
//! a mixture relaxation that turns discrete action choices into simplex
//! constrained pseudo-probabilities which are annealed into deterministic
//! switches, and a Gaussian-belief extension where an extended Kalman filter
//! propagates state uncertainty through the plan.
//!
//! Two benchmark environments are included: a gear-switching nonholonomic
//! car and quasi-static planar box pushing with an uncertain center of
//! friction, together with a batch experiment harness (see the `hyddp`
//! binary).

pub mod belief;
pub mod boxqp;
pub mod ddp;
pub mod envs;
pub mod harness;
pub mod hybrid;
pub mod numdiff;
pub mod problem;

pub use belief::{BeliefProblem, BeliefTrajectory, GaussianBelief};
pub use boxqp::{QpProblem, QpSolution};
pub use ddp::{FeedbackPolicy, IterationRecord, SolverConfig};
pub use hybrid::{CstSchedule, Mixture};
pub use problem::{ControlBounds, ControlProblem, HybridControl, HybridProblem, Trajectory};

use thiserror::Error;

/// Errors shared across the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value while differentiating coordinate {coordinate}")]
    DifferentiationFailure { coordinate: usize },

    #[error("rollout diverged at timestep {timestep}")]
    RolloutDiverged { timestep: usize },

    #[error("forward pass diverged at timestep {timestep}")]
    ForwardDiverged { timestep: usize },

    #[error("QP solve failed: {reason}")]
    QpFailure { reason: String },

    #[error("infeasible QP: {reason}")]
    QpInfeasible { reason: String },

    #[error("backward pass failed at timestep {timestep}: {source}")]
    BackwardPassFailure {
        timestep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("EKF update failed: innovation covariance not positive definite")]
    FilterFailure,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
