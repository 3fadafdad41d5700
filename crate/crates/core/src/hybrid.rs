//! Discrete actions inside a continuous optimizer.
//!
//! [`Mixture`] relaxes the per-step action choice into a pseudo-probability
//! vector: dynamics become the probability-weighted blend of the per-action
//! dynamics and costs are blended through a pseudo-Huber weight. An annealed
//! penalty on stochastic action vectors ([`stochasticity_cost`], scaled by a
//! [`CstSchedule`]) drives the probabilities to a vertex of the simplex, at
//! which point the most likely action is extracted per step.
//!
//! The module also hosts the two baselines used for comparison: greedy
//! per-step action selection during the backward pass, and the variant that
//! interpolates a fraction of the newly selected actions into the nominal
//! sequence during the line search.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::belief::{
    ekf_covariance_map, BeliefProblem, BeliefTrajectory, BeliefValueExpansion, GaussianBelief,
};
use crate::ddp::{
    fd_dynamics_jacobians, gains_from_q, value_update, FeedbackPolicy, IterationRecord,
    QExpansion, SolverConfig, ValueExpansion,
};
use crate::numdiff::{self, CostExpansion};
use crate::problem::{ControlBounds, ControlProblem, HybridProblem, Trajectory};
use crate::{Error, Result};

/// Default smoothing width for the pseudo-Huber weights.
pub const DEFAULT_KAPPA: f64 = 0.01;

/// Probability assigned to the nominal action when initializing a mixture.
pub const INITIAL_VERTEX_PROBABILITY: f64 = 1.0 - 1e-10;

/// Smoothed absolute value `sqrt(p^2 + kappa^2) - kappa` with first and
/// second derivatives. The second derivative is strictly positive, which is
/// what makes it usable as a cost weight inside a Newton-type optimizer.
pub fn pseudo_huber(p: f64, kappa: f64) -> (f64, f64, f64) {
    let root = (p * p + kappa * kappa).sqrt();
    let value = root - kappa;
    let d1 = p / root;
    let d2 = kappa * kappa / (root * root * root);
    (value, d1, d2)
}

/// Piecewise penalty on a stochastic action vector, scaled by `c_st`.
///
/// With `p_th = 1 / n_actions`, entries below the threshold pay
/// `phi(p_a)` and entries above pay `phi((1 - p_a) * (n_actions - 1))`;
/// the boundary itself belongs to the upper branch. The penalty is zero
/// exactly at the simplex vertices and maximal at the uniform distribution.
pub fn stochasticity_cost(p: &DVector<f64>, c_st: f64, n_actions: usize) -> f64 {
    stochasticity_terms(p, c_st, n_actions).0
}

/// Value, gradient and (diagonal) Hessian of [`stochasticity_cost`].
/// Derivatives are taken inside the active branch.
pub fn stochasticity_terms(
    p: &DVector<f64>,
    c_st: f64,
    n_actions: usize,
) -> (f64, DVector<f64>, DVector<f64>) {
    let p_th = 1.0 / n_actions as f64;
    let scale = (1.0 - p_th) / p_th;
    let mut value = 0.0;
    let mut grad = DVector::zeros(p.len());
    let mut hess = DVector::zeros(p.len());
    for (i, &pa) in p.iter().enumerate() {
        if pa < p_th {
            let (v, d1, d2) = pseudo_huber(pa, DEFAULT_KAPPA);
            value += v;
            grad[i] = d1;
            hess[i] = d2;
        } else {
            let (v, d1, d2) = pseudo_huber((1.0 - pa) * scale, DEFAULT_KAPPA);
            value += v;
            grad[i] = -scale * d1;
            hess[i] = scale * scale * d2;
        }
    }
    (c_st * value, grad * c_st, hess * c_st)
}

/// Clamp to `[0, 1]` and renormalize to unit sum; a degenerate sum falls
/// back to the uniform distribution.
pub fn normalize_probabilities(p_raw: &DVector<f64>) -> DVector<f64> {
    let mut p = p_raw.map(|v| v.clamp(0.0, 1.0));
    let sum = p.sum();
    if sum < 1e-12 {
        p.fill(1.0 / p.len() as f64);
    } else {
        p /= sum;
    }
    p
}

/// Renormalize the probability block of a flat control in place.
pub(crate) fn normalize_probabilities_in_place(u: &mut DVector<f64>, group: &[usize]) {
    let mut sum = 0.0;
    for &i in group {
        u[i] = u[i].clamp(0.0, 1.0);
        sum += u[i];
    }
    if sum < 1e-12 {
        let uniform = 1.0 / group.len() as f64;
        for &i in group {
            u[i] = uniform;
        }
    } else {
        for &i in group {
            u[i] /= sum;
        }
    }
}

/// Annealing schedule for the stochasticity weight: zero at first, bumped
/// to `first` and then doubled whenever an iteration's cost decrease falls
/// below `threshold`, and forced to `max` once half the iteration budget
/// has elapsed.
#[derive(Debug, Clone)]
pub struct CstSchedule {
    value: f64,
    pub first: f64,
    pub max: f64,
    pub threshold: f64,
}

impl CstSchedule {
    pub fn new(first: f64, max: f64, threshold: f64) -> Self {
        Self {
            value: 0.0,
            first,
            max,
            threshold,
        }
    }

    /// Defaults matching the benchmark setups (`threshold` is
    /// environment-specific).
    pub fn standard(threshold: f64) -> Self {
        Self::new(0.01, 1.28, threshold)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn at_max(&self) -> bool {
        self.value >= self.max
    }

    /// Apply the update rule; returns whether the weight changed.
    pub fn update(&mut self, cost_decrease: f64, iteration: usize, max_iterations: usize) -> bool {
        let old = self.value;
        if iteration >= max_iterations / 2 {
            self.value = self.max;
        } else if cost_decrease < self.threshold {
            if self.value == 0.0 {
                self.value = self.first;
            } else {
                self.value = (2.0 * self.value).min(self.max);
            }
        }
        self.value != old
    }
}

/// Initial probability vector: nearly all mass on the nominal action.
pub fn initial_probabilities(nominal_action: usize, n_actions: usize) -> DVector<f64> {
    let rest = (1.0 - INITIAL_VERTEX_PROBABILITY) / (n_actions - 1) as f64;
    DVector::from_fn(n_actions, |i, _| {
        if i == nominal_action {
            INITIAL_VERTEX_PROBABILITY
        } else {
            rest
        }
    })
}

/// Per-step most likely action; ties break toward the lowest index.
pub fn extract_discrete_plan(controls: &[DVector<f64>], n_continuous: usize) -> Vec<usize> {
    controls
        .iter()
        .map(|u| {
            let p = u.rows(n_continuous, u.len() - n_continuous);
            let mut best = 0;
            for i in 1..p.len() {
                if p[i] > p[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mixture relaxation of a hybrid problem: flat controls are
/// `[u; p_0 .. p_{N_a - 1}]` with one simplex group over the probability
/// block. Implements both the fully observable and the belief problem
/// interfaces; the stochasticity weight is owned here and updated by the
/// optimizer through `set_stochasticity_weight`.
pub struct Mixture<P: HybridProblem> {
    pub base: P,
    kappa: f64,
    cst: Cell<f64>,
    zero_cov: DMatrix<f64>,
}

impl<P: HybridProblem> Mixture<P> {
    pub fn new(base: P) -> Self {
        let n = base.state_dim();
        Self {
            base,
            kappa: DEFAULT_KAPPA,
            cst: Cell::new(0.0),
            zero_cov: DMatrix::zeros(n, n),
        }
    }

    pub fn n_continuous(&self) -> usize {
        self.base.continuous_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.base.num_actions()
    }

    fn n_state(&self) -> usize {
        self.base.state_dim()
    }

    fn n_flat(&self) -> usize {
        self.n_continuous() + self.n_actions()
    }

    pub fn stochasticity_weight(&self) -> f64 {
        self.cst.get()
    }

    fn split<'a>(&self, flat: &'a DVector<f64>) -> (DVector<f64>, DVector<f64>, &'a DVector<f64>) {
        let nu = self.n_continuous();
        (
            DVector::from(flat.rows(0, nu)),
            DVector::from(flat.rows(nu, self.n_actions())),
            flat,
        )
    }

    fn blended_dynamics(&self, x: &DVector<f64>, flat: &DVector<f64>) -> DVector<f64> {
        let (u, p, _) = self.split(flat);
        let mut out = DVector::zeros(self.base.state_dim());
        for a in 0..self.n_actions() {
            if p[a] != 0.0 {
                out += self.base.dynamics(x, &u, a) * p[a];
            }
        }
        out
    }

    fn blended_cost(&self, x: &DVector<f64>, flat: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let (u, p, _) = self.split(flat);
        let mut c = 0.0;
        for a in 0..self.n_actions() {
            let (w, _, _) = pseudo_huber(p[a], self.kappa);
            if w != 0.0 {
                c += w * self.base.running_cost(x, &u, a, cov);
            }
        }
        c
    }

    fn expansion_with_cov(&self, x: &DVector<f64>, flat: &DVector<f64>, cov: &DMatrix<f64>) -> Option<CostExpansion> {
        // Finite differences for the smooth blended part; the annealed
        // penalty has a branch boundary, so its derivatives are added
        // analytically within the active branch.
        let mut exp = numdiff::quadratize_cost(
            |xs, us| self.blended_cost(xs, us, cov),
            x,
            flat,
            numdiff::DEFAULT_STEP,
            numdiff::DEFAULT_HESSIAN_STEP,
        )
        .ok()?;
        let nu = self.n_continuous();
        let na = self.n_actions();
        let p = DVector::from(flat.rows(nu, na));
        let (value, grad, hess) = stochasticity_terms(&p, self.cst.get(), na);
        exp.value += value;
        for a in 0..na {
            exp.cu[nu + a] += grad[a];
            exp.cuu[(nu + a, nu + a)] += hess[a];
        }
        Some(exp)
    }
}

impl<P: HybridProblem> ControlProblem for Mixture<P> {
    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.n_flat()
    }
    fn dynamics(&self, x: &DVector<f64>, flat: &DVector<f64>) -> DVector<f64> {
        self.blended_dynamics(x, flat)
    }
    fn running_cost(&self, x: &DVector<f64>, flat: &DVector<f64>) -> f64 {
        let p = DVector::from(flat.rows(self.n_continuous(), self.n_actions()));
        self.blended_cost(x, flat, &self.zero_cov)
            + stochasticity_cost(&p, self.cst.get(), self.n_actions())
    }
    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        self.base.final_cost(x, &self.zero_cov)
    }
    fn bounds(&self) -> ControlBounds {
        self.base
            .continuous_bounds()
            .augment_with_probabilities(self.n_actions())
    }
    fn simplex_groups(&self) -> Vec<Vec<usize>> {
        vec![(self.n_continuous()..self.n_flat()).collect()]
    }
    fn cost_expansion(&self, x: &DVector<f64>, flat: &DVector<f64>) -> Option<CostExpansion> {
        self.expansion_with_cov(x, flat, &self.zero_cov)
    }
    fn set_stochasticity_weight(&self, weight: f64) {
        self.cst.set(weight);
    }
}

impl<P: HybridProblem> BeliefProblem for Mixture<P> {
    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.n_flat()
    }
    fn mean_dynamics(&self, x: &DVector<f64>, flat: &DVector<f64>) -> DVector<f64> {
        self.blended_dynamics(x, flat)
    }
    fn process_noise(&self, x: &DVector<f64>, flat: &DVector<f64>) -> DMatrix<f64> {
        let (u, p, _) = self.split(flat);
        let mut m = DMatrix::zeros(self.n_state(), self.n_state());
        for a in 0..self.n_actions() {
            if p[a] != 0.0 {
                m += self.base.process_noise(x, &u, a) * p[a];
            }
        }
        m
    }
    fn obs_dim(&self) -> usize {
        self.base.obs_dim()
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        self.base.observe(x)
    }
    fn obs_noise(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.base.obs_noise(x)
    }
    fn running_cost(&self, x: &DVector<f64>, flat: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let p = DVector::from(flat.rows(self.n_continuous(), self.n_actions()));
        self.blended_cost(x, flat, cov) + stochasticity_cost(&p, self.cst.get(), self.n_actions())
    }
    fn final_cost(&self, x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        self.base.final_cost(x, cov)
    }
    fn bounds(&self) -> ControlBounds {
        self.base
            .continuous_bounds()
            .augment_with_probabilities(self.n_actions())
    }
    fn simplex_groups(&self) -> Vec<Vec<usize>> {
        vec![(self.n_continuous()..self.n_flat()).collect()]
    }
    fn cost_expansion(
        &self,
        x: &DVector<f64>,
        flat: &DVector<f64>,
        cov: &DMatrix<f64>,
    ) -> Option<CostExpansion> {
        self.expansion_with_cov(x, flat, cov)
    }
    fn set_stochasticity_weight(&self, weight: f64) {
        self.cst.set(weight);
    }
}

/// Greedy discrete choice: one-step cost plus the quadratic value model at
/// the successor, per action; ties keep the nominal action.
pub fn greedy_action_choice<P: HybridProblem>(
    problem: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
    nominal_action: usize,
    next_nominal_state: &DVector<f64>,
    next_value: &ValueExpansion,
    cov: &DMatrix<f64>,
) -> usize {
    let values: Vec<f64> = (0..problem.num_actions())
        .map(|a| {
            let dx = problem.dynamics(x, u, a) - next_nominal_state;
            problem.running_cost(x, u, a, cov) + next_value.eval(&dx)
        })
        .collect();
    // Start from the nominal action so exact ties keep it; among strictly
    // better candidates the lowest index wins.
    let mut best = nominal_action;
    for (a, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = a;
        }
    }
    best
}

/// Adopt `ceil(alpha * |D|)` of the differing new actions, spread evenly
/// (in time order) over the differing indices.
pub fn interpolate_actions(old: &[usize], new: &[usize], alpha: f64) -> Result<Vec<usize>> {
    if old.len() != new.len() {
        return Err(Error::InvalidArgument(
            "action sequences must have equal length".into(),
        ));
    }
    let differing: Vec<usize> = (0..old.len()).filter(|&t| old[t] != new[t]).collect();
    let mut out = old.to_vec();
    if differing.is_empty() {
        return Ok(out);
    }
    let count = (alpha * differing.len() as f64).ceil() as usize;
    let count = count.min(differing.len());
    for i in 0..count {
        let pos = i * differing.len() / count;
        out[differing[pos]] = new[differing[pos]];
    }
    Ok(out)
}

/// Which baseline drives the discrete actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    Greedy,
    Interpolate,
}

/// Result of a baseline run: the trajectory carries continuous controls
/// only, with the discrete plan alongside.
#[derive(Debug)]
pub struct SwitchedResult {
    pub trajectory: Trajectory,
    pub actions: Vec<usize>,
    pub policy: FeedbackPolicy,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

/// Fully observable view of one discrete action of a hybrid problem.
struct FixedAction<'a, P: HybridProblem> {
    base: &'a P,
    action: usize,
    zero_cov: DMatrix<f64>,
}

impl<'a, P: HybridProblem> FixedAction<'a, P> {
    fn new(base: &'a P, action: usize) -> Self {
        let n = base.state_dim();
        Self {
            base,
            action,
            zero_cov: DMatrix::zeros(n, n),
        }
    }
}

impl<P: HybridProblem> ControlProblem for FixedAction<'_, P> {
    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.base.continuous_dim()
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.base.dynamics(x, u, self.action)
    }
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.base.running_cost(x, u, self.action, &self.zero_cov)
    }
    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        self.base.final_cost(x, &self.zero_cov)
    }
    fn bounds(&self) -> ControlBounds {
        self.base.continuous_bounds()
    }
}

/// Roll out mean dynamics under an explicit action sequence.
pub fn rollout_switched<P: HybridProblem>(
    problem: &P,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
    actions: &[usize],
) -> Result<Trajectory> {
    if controls.len() != actions.len() {
        return Err(Error::InvalidArgument(
            "controls and actions must have equal length".into(),
        ));
    }
    let zero_cov = DMatrix::zeros(problem.state_dim(), problem.state_dim());
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut stage_costs = Vec::with_capacity(controls.len());
    let mut x = x0.clone();
    states.push(x.clone());
    for (t, (u, &a)) in controls.iter().zip(actions.iter()).enumerate() {
        stage_costs.push(problem.running_cost(&x, u, a, &zero_cov));
        x = problem.dynamics(&x, u, a);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDiverged { timestep: t });
        }
        states.push(x.clone());
    }
    let final_cost = problem.final_cost(&x, &zero_cov);
    let total_cost = stage_costs.iter().sum::<f64>() + final_cost;
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
        stage_costs,
        final_cost,
        total_cost,
    })
}

struct SwitchedBackward {
    policy: FeedbackPolicy,
    new_actions: Vec<usize>,
    d1: f64,
    d2: f64,
}

fn switched_backward<P: HybridProblem>(
    problem: &P,
    nominal: &Trajectory,
    actions: &[usize],
    reg: f64,
    config: &SolverConfig,
    warm: Option<&FeedbackPolicy>,
) -> Result<SwitchedBackward> {
    let horizon = nominal.horizon();
    let bounds = problem.continuous_bounds();
    let zero_cov = DMatrix::zeros(problem.state_dim(), problem.state_dim());
    let fail = |t: usize, e: Error| Error::BackwardPassFailure {
        timestep: t,
        source: Box::new(e),
    };

    let view_t = FixedAction::new(problem, actions[horizon - 1]);
    let v_final = problem.final_cost(&nominal.states[horizon], &zero_cov);
    let vx = numdiff::finite_diff_gradient(
        |xs| view_t.final_cost(xs),
        &nominal.states[horizon],
        config.jacobian_step,
    )
    .map_err(|e| fail(horizon, e))?;
    let mut vxx = numdiff::finite_diff_hessian(
        |xs| view_t.final_cost(xs),
        &nominal.states[horizon],
        config.hessian_step,
    )
    .map_err(|e| fail(horizon, e))?;
    numdiff::symmetrize(&mut vxx);

    let mut value = ValueExpansion {
        v: v_final,
        vx,
        vxx,
    };
    let mut cost_to_go = v_final;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    let mut steps = Vec::with_capacity(horizon);
    let mut new_actions = vec![0usize; horizon];

    for t in (0..horizon).rev() {
        let x = &nominal.states[t];
        let u = &nominal.controls[t];
        let chosen = greedy_action_choice(
            problem,
            x,
            u,
            actions[t],
            &nominal.states[t + 1],
            &value,
            &zero_cov,
        );
        new_actions[t] = chosen;

        let view = FixedAction::new(problem, chosen);
        let (a, b) =
            fd_dynamics_jacobians(&view, x, u, config.jacobian_step).map_err(|e| fail(t, e))?;
        let cexp = numdiff::quadratize_cost(
            |xs, us| view.running_cost(xs, us),
            x,
            u,
            config.jacobian_step,
            config.hessian_step,
        )
        .map_err(|e| fail(t, e))?;
        let cuu = numdiff::clamp_eigenvalues(&cexp.cuu, config.cuu_floor);

        let q = QExpansion {
            qx: &cexp.cx + a.transpose() * &value.vx,
            qu: &cexp.cu + b.transpose() * &value.vx,
            qxx: {
                let mut m = &cexp.cxx + a.transpose() * &value.vxx * &a;
                numdiff::symmetrize(&mut m);
                m
            },
            quu: {
                let mut m = cuu + b.transpose() * &value.vxx * &b;
                numdiff::symmetrize(&mut m);
                m
            },
            qux: &cexp.cux + b.transpose() * &value.vxx * &a,
        };

        let warm_k = warm.and_then(|w| w.steps.get(t)).map(|s| &s.k);
        let (step, sd1, sd2) =
            gains_from_q(&q, &bounds.lower, &bounds.upper, vec![], u, reg, warm_k)
                .map_err(|e| fail(t, e))?;
        d1 += sd1;
        d2 += sd2;

        let (vx, vxx) = value_update(&q, &step);
        cost_to_go += nominal.stage_costs[t];
        value = ValueExpansion {
            v: cost_to_go,
            vx,
            vxx,
        };
        steps.push(step);
    }
    steps.reverse();
    Ok(SwitchedBackward {
        policy: FeedbackPolicy { steps },
        new_actions,
        d1,
        d2,
    })
}

fn switched_forward<P: HybridProblem>(
    problem: &P,
    nominal: &Trajectory,
    actions: &[usize],
    policy: &FeedbackPolicy,
    alpha: f64,
) -> Result<Trajectory> {
    let horizon = nominal.horizon();
    let bounds = problem.continuous_bounds();
    let zero_cov = DMatrix::zeros(problem.state_dim(), problem.state_dim());
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut stage_costs = Vec::with_capacity(horizon);
    let mut x = nominal.states[0].clone();
    states.push(x.clone());
    for t in 0..horizon {
        let dx = &x - &nominal.states[t];
        let step = &policy.steps[t];
        let mut u = &nominal.controls[t] + &step.k * alpha + &step.k_mat * dx;
        bounds.clamp(&mut u);
        stage_costs.push(problem.running_cost(&x, &u, actions[t], &zero_cov));
        x = problem.dynamics(&x, &u, actions[t]);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::ForwardDiverged { timestep: t });
        }
        states.push(x.clone());
        controls.push(u);
    }
    let final_cost = problem.final_cost(&x, &zero_cov);
    let total_cost = stage_costs.iter().sum::<f64>() + final_cost;
    Ok(Trajectory {
        states,
        controls,
        stage_costs,
        final_cost,
        total_cost,
    })
}

/// Optimize with greedy or interpolated discrete action updates.
pub fn optimize_switched<P: HybridProblem>(
    problem: &P,
    config: &SolverConfig,
    x0: &DVector<f64>,
    initial_controls: &[DVector<f64>],
    initial_actions: &[usize],
    mode: BaselineMode,
) -> Result<SwitchedResult> {
    let mut nominal = rollout_switched(problem, x0, initial_controls, initial_actions)?;
    let mut actions = initial_actions.to_vec();
    let mut reg = config.reg_init;
    let mut log = Vec::new();
    let mut converged = false;
    let mut policy = FeedbackPolicy::default();

    for iteration in 1..=config.max_iterations {
        let back = loop {
            match switched_backward(problem, &nominal, &actions, reg, config, Some(&policy)) {
                Ok(b) => break b,
                Err(_) if reg < config.reg_max => reg = (reg * config.reg_scale).max(config.reg_min),
                Err(e) => {
                    if policy.steps.is_empty() {
                        return Err(e);
                    }
                    return Ok(SwitchedResult {
                        trajectory: nominal,
                        actions,
                        policy,
                        log,
                        converged: false,
                    });
                }
            }
        };
        policy = back.policy;

        if back.new_actions == actions && -(back.d1 + back.d2) < config.tol_decrease {
            converged = true;
            break;
        }

        let mut accepted: Option<(Trajectory, Vec<usize>, f64, f64)> = None;
        for &alpha in &config.alphas {
            let trial_actions = match mode {
                BaselineMode::Greedy => back.new_actions.clone(),
                BaselineMode::Interpolate => {
                    interpolate_actions(&actions, &back.new_actions, alpha)?
                }
            };
            let Ok(candidate) = switched_forward(problem, &nominal, &trial_actions, &policy, alpha)
            else {
                continue;
            };
            let dcost = nominal.total_cost - candidate.total_cost;
            let expected = -(alpha * back.d1 + alpha * alpha * back.d2);
            let ok = if expected > 0.0 {
                dcost > config.acceptance_ratio * expected
            } else {
                dcost > 0.0
            };
            if ok {
                accepted = Some((candidate, trial_actions, alpha, dcost));
                break;
            }
        }

        match accepted {
            Some((candidate, trial_actions, alpha, dcost)) => {
                nominal = candidate;
                actions = trial_actions;
                reg = {
                    let r = reg / config.reg_scale;
                    if r < config.reg_min {
                        0.0
                    } else {
                        r
                    }
                };
                log.push(IterationRecord {
                    iteration,
                    total_cost: nominal.total_cost,
                    alpha,
                    regularization: reg,
                    cst: 0.0,
                    accepted: true,
                });
                if dcost < config.tol_decrease {
                    converged = true;
                    break;
                }
            }
            None => {
                reg = (reg * config.reg_scale).max(config.reg_min);
                log.push(IterationRecord {
                    iteration,
                    total_cost: nominal.total_cost,
                    alpha: 0.0,
                    regularization: reg,
                    cst: 0.0,
                    accepted: false,
                });
                if reg > config.reg_max {
                    break;
                }
            }
        }
    }

    Ok(SwitchedResult {
        trajectory: nominal,
        actions,
        policy,
        log,
        converged,
    })
}

/// Belief-space view of one discrete action of a hybrid problem.
pub(crate) struct FixedActionBelief<'a, P: HybridProblem> {
    pub base: &'a P,
    pub action: usize,
}

impl<P: HybridProblem> BeliefProblem for FixedActionBelief<'_, P> {
    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.base.continuous_dim()
    }
    fn mean_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.base.dynamics(x, u, self.action)
    }
    fn process_noise(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        self.base.process_noise(x, u, self.action)
    }
    fn obs_dim(&self) -> usize {
        self.base.obs_dim()
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        self.base.observe(x)
    }
    fn obs_noise(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.base.obs_noise(x)
    }
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        self.base.running_cost(x, u, self.action, cov)
    }
    fn final_cost(&self, x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        self.base.final_cost(x, cov)
    }
    fn bounds(&self) -> ControlBounds {
        self.base.continuous_bounds()
    }
}

/// Greedy action choice under a belief-space value model: each candidate is
/// scored by its stage cost plus the value at the predicted next belief,
/// including the covariance-sensitivity term.
pub fn greedy_belief_action_choice<P: HybridProblem>(
    problem: &P,
    belief: &GaussianBelief,
    u: &DVector<f64>,
    nominal_action: usize,
    next_nominal: &GaussianBelief,
    next_value: &BeliefValueExpansion,
    jacobian_step: f64,
) -> usize {
    let values: Vec<f64> = (0..problem.num_actions())
        .map(|a| {
            let view = FixedActionBelief { base: problem, action: a };
            let Ok(next_cov) =
                ekf_covariance_map(&view, &belief.mean, u, &belief.cov, jacobian_step)
            else {
                return f64::INFINITY;
            };
            let dx = problem.dynamics(&belief.mean, u, a) - &next_nominal.mean;
            let dcov = next_cov - &next_nominal.cov;
            problem.running_cost(&belief.mean, u, a, &belief.cov) + next_value.eval(&dx, &dcov)
        })
        .collect();
    let mut best = nominal_action;
    for (a, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = a;
        }
    }
    best
}

/// Result of a belief-space baseline run.
#[derive(Debug)]
pub struct SwitchedBeliefResult {
    pub trajectory: BeliefTrajectory,
    pub actions: Vec<usize>,
    pub policy: FeedbackPolicy,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

/// Greedy / interpolated baselines under partial observability. Mirrors
/// [`optimize_switched`] with EKF belief propagation in the forward pass and
/// covariance-sensitivity terms in the backward pass.
pub fn optimize_switched_belief<P: HybridProblem>(
    problem: &P,
    config: &SolverConfig,
    b0: &GaussianBelief,
    initial_controls: &[DVector<f64>],
    initial_actions: &[usize],
    mode: BaselineMode,
) -> Result<SwitchedBeliefResult> {
    use crate::belief::switched_belief_passes as passes;

    let mut nominal = rollout_switched_beliefs(problem, b0, initial_controls, initial_actions)?;
    let mut actions = initial_actions.to_vec();
    let mut reg = config.reg_init;
    let mut log = Vec::new();
    let mut converged = false;
    let mut policy = FeedbackPolicy::default();

    for iteration in 1..=config.max_iterations {
        let back = loop {
            match passes::backward(problem, &nominal, &actions, reg, config, Some(&policy)) {
                Ok(b) => break b,
                Err(_) if reg < config.reg_max => reg = (reg * config.reg_scale).max(config.reg_min),
                Err(e) => {
                    if policy.steps.is_empty() {
                        return Err(e);
                    }
                    return Ok(SwitchedBeliefResult {
                        trajectory: nominal,
                        actions,
                        policy,
                        log,
                        converged: false,
                    });
                }
            }
        };
        policy = back.policy;

        if back.new_actions == actions && -(back.d1 + back.d2) < config.tol_decrease {
            converged = true;
            break;
        }

        let mut accepted: Option<(BeliefTrajectory, Vec<usize>, f64, f64)> = None;
        for &alpha in &config.alphas {
            let trial_actions = match mode {
                BaselineMode::Greedy => back.new_actions.clone(),
                BaselineMode::Interpolate => {
                    interpolate_actions(&actions, &back.new_actions, alpha)?
                }
            };
            let Ok(candidate) =
                passes::forward(problem, &nominal, &trial_actions, &policy, alpha)
            else {
                continue;
            };
            let dcost = nominal.total_cost - candidate.total_cost;
            let expected = -(alpha * back.d1 + alpha * alpha * back.d2);
            let ok = if expected > 0.0 {
                dcost > config.acceptance_ratio * expected
            } else {
                dcost > 0.0
            };
            if ok {
                accepted = Some((candidate, trial_actions, alpha, dcost));
                break;
            }
        }

        match accepted {
            Some((candidate, trial_actions, alpha, dcost)) => {
                nominal = candidate;
                actions = trial_actions;
                reg = {
                    let r = reg / config.reg_scale;
                    if r < config.reg_min {
                        0.0
                    } else {
                        r
                    }
                };
                log.push(IterationRecord {
                    iteration,
                    total_cost: nominal.total_cost,
                    alpha,
                    regularization: reg,
                    cst: 0.0,
                    accepted: true,
                });
                if dcost < config.tol_decrease {
                    converged = true;
                    break;
                }
            }
            None => {
                reg = (reg * config.reg_scale).max(config.reg_min);
                log.push(IterationRecord {
                    iteration,
                    total_cost: nominal.total_cost,
                    alpha: 0.0,
                    regularization: reg,
                    cst: 0.0,
                    accepted: false,
                });
                if reg > config.reg_max {
                    break;
                }
            }
        }
    }

    Ok(SwitchedBeliefResult {
        trajectory: nominal,
        actions,
        policy,
        log,
        converged,
    })
}

/// EKF rollout (planning mode) under an explicit action sequence.
pub fn rollout_switched_beliefs<P: HybridProblem>(
    problem: &P,
    b0: &GaussianBelief,
    controls: &[DVector<f64>],
    actions: &[usize],
) -> Result<BeliefTrajectory> {
    if controls.len() != actions.len() {
        return Err(Error::InvalidArgument(
            "controls and actions must have equal length".into(),
        ));
    }
    let mut beliefs = Vec::with_capacity(controls.len() + 1);
    let mut stage_costs = Vec::with_capacity(controls.len());
    let mut b = b0.clone();
    beliefs.push(b.clone());
    for (t, (u, &a)) in controls.iter().zip(actions.iter()).enumerate() {
        let view = FixedActionBelief { base: problem, action: a };
        stage_costs.push(problem.running_cost(&b.mean, u, a, &b.cov));
        b = crate::belief::ekf_step(&view, &b, u, None, numdiff::DEFAULT_STEP)
            .map_err(|_| Error::RolloutDiverged { timestep: t })?;
        beliefs.push(b.clone());
    }
    let final_cost = problem.final_cost(&b.mean, &b.cov);
    let total_cost = stage_costs.iter().sum::<f64>() + final_cost;
    Ok(BeliefTrajectory {
        beliefs,
        controls: controls.to_vec(),
        stage_costs,
        final_cost,
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pseudo_huber_values() {
        let (zero, _, d2) = pseudo_huber(0.0, 0.01);
        assert_eq!(zero, 0.0);
        assert!(d2 > 0.0);
        let (one, _, _) = pseudo_huber(1.0, 0.01);
        assert_abs_diff_eq!(one, (1.0f64 + 1e-4).sqrt() - 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(one, 0.990050, epsilon = 1e-6);
        // Even symmetry.
        for p in [0.1, 0.37, 0.99] {
            assert_eq!(pseudo_huber(p, 0.01).0, pseudo_huber(-p, 0.01).0);
        }
    }

    #[test]
    fn pseudo_huber_derivatives_match_finite_differences() {
        let h = 1e-6;
        for &p in &[0.003, 0.2, 0.5, 0.9] {
            let (_, d1, d2) = pseudo_huber(p, 0.01);
            let fp = pseudo_huber(p + h, 0.01).0;
            let fm = pseudo_huber(p - h, 0.01).0;
            let f0 = pseudo_huber(p, 0.01).0;
            assert_abs_diff_eq!(d1, (fp - fm) / (2.0 * h), epsilon = 1e-6);
            assert_abs_diff_eq!(d2, (fp - 2.0 * f0 + fm) / (h * h), epsilon = 1e-3);
        }
    }

    #[test]
    fn stochasticity_cost_vertices_and_uniform() {
        let vertex = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(stochasticity_cost(&vertex, 3.7, 2), 0.0);

        let uniform = DVector::from_vec(vec![0.5, 0.5]);
        assert_abs_diff_eq!(stochasticity_cost(&uniform, 1.0, 2), 0.980200, epsilon = 1e-6);

        assert_eq!(stochasticity_cost(&uniform, 0.0, 2), 0.0);
    }

    #[test]
    fn stochasticity_maximum_is_at_uniform() {
        // Grid over the 1- and 2-simplex.
        for n in [2usize, 3] {
            let uniform = DVector::from_element(n, 1.0 / n as f64);
            let peak = stochasticity_cost(&uniform, 1.0, n);
            let m = 1000;
            let mut max_seen = f64::NEG_INFINITY;
            if n == 2 {
                for k in 0..=m {
                    let p = DVector::from_vec(vec![k as f64 / m as f64, 1.0 - k as f64 / m as f64]);
                    max_seen = max_seen.max(stochasticity_cost(&p, 1.0, n));
                }
            } else {
                for i in 0..=m {
                    for j in 0..=(m - i) {
                        let a = i as f64 / m as f64;
                        let b = j as f64 / m as f64;
                        let p = DVector::from_vec(vec![a, b, 1.0 - a - b]);
                        max_seen = max_seen.max(stochasticity_cost(&p, 1.0, n));
                    }
                }
            }
            assert!(max_seen <= peak + 1e-9, "n={n}: {max_seen} > {peak}");
            // And zero at every vertex.
            for v in 0..n {
                let mut p = DVector::zeros(n);
                p[v] = 1.0;
                assert_eq!(stochasticity_cost(&p, 1.0, n), 0.0);
            }
        }
    }

    #[test]
    fn stochasticity_derivatives_match_finite_differences_per_branch() {
        // Gradient probes can be tiny; second differences need a larger
        // step to avoid cancellation noise.
        let hg = 1e-7;
        let hh = 1e-4;
        for n in [2usize, 3, 4] {
            let p_th = 1.0 / n as f64;
            for &base in &[0.02, p_th * 0.6, p_th + 0.03, 0.7, 0.95] {
                let mut p = DVector::from_element(n, (1.0 - base) / (n as f64 - 1.0));
                p[0] = base;
                let (_, grad, hess) = stochasticity_terms(&p, 1.3, n);
                let probe = |delta: f64| {
                    let mut q = p.clone();
                    q[0] += delta;
                    stochasticity_cost(&q, 1.3, n)
                };
                // Stay inside the active branch of coordinate 0.
                assert_abs_diff_eq!(
                    grad[0],
                    (probe(hg) - probe(-hg)) / (2.0 * hg),
                    epsilon = 1e-5
                );
                let d2 = (probe(hh) - 2.0 * probe(0.0) + probe(-hh)) / (hh * hh);
                assert_abs_diff_eq!(hess[0], d2, epsilon = 1e-3 * hess[0].max(1.0));
                assert!(hess[0] > 0.0, "second derivative must be positive");
            }
        }
    }

    #[test]
    fn normalization_examples() {
        let p = normalize_probabilities(&DVector::from_vec(vec![0.6, 0.6]));
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);

        let p = normalize_probabilities(&DVector::from_vec(vec![1.2, -0.2]));
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);

        let p = normalize_probabilities(&DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(p[0], 0.5);
        assert_eq!(p[1], 0.5);
    }

    #[test]
    fn cst_schedule_follows_update_rule() {
        let mut s = CstSchedule::standard(0.01);
        assert_eq!(s.value(), 0.0);
        // Small decrease bumps zero to the first value.
        assert!(s.update(0.001, 3, 400));
        assert_eq!(s.value(), 0.01);
        // Large decrease leaves it unchanged.
        let mut s2 = CstSchedule::standard(0.01);
        s2.update(0.001, 3, 400);
        s2.update(0.001, 4, 400);
        assert_eq!(s2.value(), 0.02);
        assert!(!s2.update(5.0, 5, 400));
        assert_eq!(s2.value(), 0.02);
        // Half the budget forces the max.
        let mut s3 = CstSchedule::standard(0.0001);
        assert!(s3.update(100.0, 200, 400));
        assert_eq!(s3.value(), 1.28);
        assert!(s3.at_max());
        // Never decreases, never exceeds max.
        let mut s4 = CstSchedule::standard(0.01);
        let mut last = 0.0;
        for it in 0..300 {
            s4.update(0.0, it, 400);
            assert!(s4.value() >= last);
            assert!(s4.value() <= 1.28);
            last = s4.value();
        }
    }

    #[test]
    fn extract_plan_argmax_and_ties() {
        let mk = |p: Vec<f64>| {
            let mut u = vec![9.9];
            u.extend(p);
            DVector::from_vec(u)
        };
        let controls = vec![mk(vec![0.99, 0.01]), mk(vec![0.5, 0.5]), mk(vec![0.1, 0.9])];
        assert_eq!(extract_discrete_plan(&controls, 1), vec![0, 0, 1]);
    }

    #[test]
    fn extract_plan_roundtrips_deterministic_probabilities() {
        let plan = vec![2usize, 0, 1, 1, 2];
        let controls: Vec<DVector<f64>> = plan
            .iter()
            .map(|&a| {
                let mut u = DVector::zeros(4);
                u[1 + a] = 1.0;
                u
            })
            .collect();
        assert_eq!(extract_discrete_plan(&controls, 1), plan);
    }

    #[test]
    fn interpolation_spreads_new_actions_evenly() {
        let old = vec![1usize, 1, 1, 1];
        let new = vec![2usize, 2, 2, 2];
        assert_eq!(
            interpolate_actions(&old, &new, 0.5).unwrap(),
            vec![2, 1, 2, 1]
        );
        assert_eq!(interpolate_actions(&old, &new, 1.0).unwrap(), new);
        assert_eq!(interpolate_actions(&old, &new, 0.0).unwrap(), old);
        assert!(interpolate_actions(&old, &new[..3], 0.5).is_err());
    }

    #[test]
    fn interpolation_only_touches_differing_indices() {
        let old = vec![0usize, 1, 0, 1, 0, 1];
        let new = vec![0usize, 2, 0, 2, 0, 2];
        let half = interpolate_actions(&old, &new, 0.4).unwrap();
        // ceil(0.4 * 3) = 2 of the three differing slots adopt the new action.
        let changed = half.iter().zip(old.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 2);
        for t in [0, 2, 4] {
            assert_eq!(half[t], old[t]);
        }
    }

    #[test]
    fn initial_probability_vector_is_on_the_simplex() {
        let p = initial_probabilities(1, 3);
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
        assert!(p[1] > 0.999999);
        assert!(p[0] > 0.0 && p[2] > 0.0);
    }
}
