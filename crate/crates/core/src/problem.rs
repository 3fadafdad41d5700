//! Problem interfaces and trajectory containers.
//!
//! A fully observable problem exposes flat-control dynamics and costs via
//! [`ControlProblem`]; environments with a discrete action choice implement
//! [`HybridProblem`] and are adapted by the `hybrid` module. Controls are
//! plain `DVector`s inside the solvers; [`HybridControl`] is the validated
//! domain view (continuous block plus action pseudo-probabilities).

use nalgebra::{DMatrix, DVector};

use crate::numdiff::CostExpansion;
use crate::{Error, Result};

/// Tolerance for the simplex invariants on probability blocks.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Elementwise lower/upper limits for a (possibly hybrid-augmented) control.
#[derive(Debug, Clone)]
pub struct ControlBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ControlBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidArgument(
                "bound vectors must have equal length".into(),
            ));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidArgument(
                "lower bound exceeds upper bound".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// Unbounded box of dimension `n`.
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Append the `[0, 1]` probability box for `n_actions` entries.
    pub fn augment_with_probabilities(&self, n_actions: usize) -> Self {
        let n = self.dim() + n_actions;
        let mut lower = DVector::zeros(n);
        let mut upper = DVector::zeros(n);
        lower.rows_mut(0, self.dim()).copy_from(&self.lower);
        upper.rows_mut(0, self.dim()).copy_from(&self.upper);
        for i in self.dim()..n {
            lower[i] = 0.0;
            upper[i] = 1.0;
        }
        Self { lower, upper }
    }

    pub fn clamp(&self, u: &mut DVector<f64>) {
        for i in 0..u.len() {
            u[i] = u[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// A continuous control vector together with discrete-action
/// pseudo-probabilities. `p` is empty for purely continuous problems.
#[derive(Debug, Clone)]
pub struct HybridControl {
    pub u: DVector<f64>,
    pub p: DVector<f64>,
}

impl HybridControl {
    /// Validate the simplex invariants on the probability block.
    pub fn new(u: DVector<f64>, p: DVector<f64>) -> Result<Self> {
        if !p.is_empty() {
            if p.iter().any(|&v| v < -SIMPLEX_TOL || v > 1.0 + SIMPLEX_TOL) {
                return Err(Error::InvalidArgument(
                    "action probability outside [0, 1]".into(),
                ));
            }
            if (p.sum() - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidArgument(
                    "action probabilities do not sum to 1".into(),
                ));
            }
        }
        Ok(Self { u, p })
    }

    pub fn continuous(u: DVector<f64>) -> Self {
        Self {
            u,
            p: DVector::zeros(0),
        }
    }

    /// Flat vector `[u; p]` as consumed by the solvers.
    pub fn flat(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.u.len() + self.p.len());
        z.rows_mut(0, self.u.len()).copy_from(&self.u);
        z.rows_mut(self.u.len(), self.p.len()).copy_from(&self.p);
        z
    }

    pub fn from_flat(flat: &DVector<f64>, n_u: usize) -> Self {
        Self {
            u: DVector::from(flat.rows(0, n_u)),
            p: DVector::from(flat.rows(n_u, flat.len() - n_u)),
        }
    }
}

/// Fully observable control problem over flat control vectors.
///
/// Analytic derivatives are optional; the default finite-difference path
/// uses [`numdiff`] with the steps in the solver configuration.
pub trait ControlProblem {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn final_cost(&self, x: &DVector<f64>) -> f64;
    fn bounds(&self) -> ControlBounds;

    /// Index sets (into the flat control) each constrained to sum to one.
    fn simplex_groups(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }

    /// Analytic `(f_x, f_u)`, if available.
    fn dynamics_jacobians(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }

    /// Analytic stage-cost expansion, if available.
    fn cost_expansion(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<CostExpansion> {
        None
    }

    /// Analytic final-cost value, gradient and Hessian, if available.
    fn final_cost_expansion(
        &self,
        _x: &DVector<f64>,
    ) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        None
    }

    /// Update the annealing weight on the stochastic-action penalty.
    /// No-op for problems without a probability block.
    fn set_stochasticity_weight(&self, _weight: f64) {}
}

/// Environment contract for problems with one discrete action choice per
/// step in addition to the continuous control.
pub trait HybridProblem {
    fn state_dim(&self) -> usize;
    fn continuous_dim(&self) -> usize;
    fn num_actions(&self) -> usize;

    /// Mean dynamics for a specific discrete action.
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, action: usize) -> DVector<f64>;

    /// Process-noise covariance (symmetric PSD).
    fn process_noise(&self, x: &DVector<f64>, u: &DVector<f64>, action: usize) -> DMatrix<f64>;

    fn obs_dim(&self) -> usize;
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Observation-noise covariance (symmetric positive definite).
    fn obs_noise(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Stage cost; `cov` is the belief covariance (zero when fully observed).
    fn running_cost(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        action: usize,
        cov: &DMatrix<f64>,
    ) -> f64;
    fn final_cost(&self, x: &DVector<f64>, cov: &DMatrix<f64>) -> f64;

    fn continuous_bounds(&self) -> ControlBounds;

    /// Analytic `(f_x, f_u)` for one action, if available. Environments
    /// with switching dynamics should prefer this over finite differences,
    /// which are meaningless across the switch boundary.
    fn dynamics_jacobians(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _action: usize,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }

    /// Analytic observation Jacobian, if available.
    fn obs_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// A rolled-out trajectory: `T + 1` states, `T` flat controls, per-step
/// stage costs and the final cost.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    pub final_cost: f64,
    pub total_cost: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Recompute the total from the parts; used by consistency checks.
    pub fn recompute_total(&self) -> f64 {
        self.stage_costs.iter().sum::<f64>() + self.final_cost
    }
}

/// Roll the mean dynamics forward under a fixed control sequence.
///
/// No noise is sampled; stage costs and the final cost are recorded as the
/// states are produced. A non-finite state aborts with the timestep index.
pub fn rollout<P: ControlProblem>(
    problem: &P,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut stage_costs = Vec::with_capacity(controls.len());
    let mut x = x0.clone();
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::RolloutDiverged { timestep: 0 });
    }
    states.push(x.clone());
    for (t, u) in controls.iter().enumerate() {
        stage_costs.push(problem.running_cost(&x, u));
        x = problem.dynamics(&x, u);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDiverged { timestep: t });
        }
        states.push(x.clone());
    }
    let final_cost = problem.final_cost(&x);
    let total_cost = stage_costs.iter().sum::<f64>() + final_cost;
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
        stage_costs,
        final_cost,
        total_cost,
    })
}
