//! Gaussian-belief trajectory optimization.
//!
//! Beliefs are `(mean, covariance)` pairs propagated by an extended Kalman
//! filter. During planning the innovation is zero (the mean follows the
//! dynamics alone); closed-loop simulation feeds sampled observations back
//! through the filter.
//!
//! The backward pass extends the fully observable one with a linear
//! covariance sensitivity: the value function carries a vector `v_sigma`
//! (the gradient with respect to the column-stacked covariance), which is
//! propagated through the one-step EKF covariance map. The map's
//! derivatives with respect to the mean, the control and the covariance are
//! obtained by finite differences, so any black-box environment works. The
//! resulting Q terms feed the same box/simplex QP as the fully observable
//! solver, which is what makes hard control limits available under partial
//! observability.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ddp::{
    gains_from_q, value_update, FeedbackPolicy, IterationRecord, QExpansion, SolverConfig,
};
use crate::hybrid::{normalize_probabilities_in_place, CstSchedule};
use crate::numdiff::{self, CostExpansion};
use crate::problem::ControlBounds;
use crate::{Error, Result};

/// Gaussian state estimate. The covariance is kept symmetric PSD: it is
/// re-symmetrized and its eigenvalues floored at zero after every update.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let mut b = Self { mean, cov };
        b.repair();
        b
    }

    /// Point belief with zero covariance.
    pub fn certain(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Re-symmetrize and clamp negative eigenvalues to zero.
    pub fn repair(&mut self) {
        numdiff::symmetrize(&mut self.cov);
        let eig = self.cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&v| v < 0.0) {
            let clamped = eig.eigenvalues.map(|v| v.max(0.0));
            self.cov = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            numdiff::symmetrize(&mut self.cov);
        }
    }
}

/// Belief-space problem: mean dynamics with process noise, a noisy
/// observation channel, and costs that may depend on the covariance.
pub trait BeliefProblem {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    fn mean_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Process-noise covariance `M(x, u)` (symmetric PSD).
    fn process_noise(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;

    fn obs_dim(&self) -> usize;
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Observation-noise covariance `N(x)` (symmetric positive definite).
    fn obs_noise(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, cov: &DMatrix<f64>) -> f64;
    fn final_cost(&self, x: &DVector<f64>, cov: &DMatrix<f64>) -> f64;

    fn bounds(&self) -> ControlBounds;
    fn simplex_groups(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }

    fn mean_jacobians(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
    fn obs_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn cost_expansion(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _cov: &DMatrix<f64>,
    ) -> Option<CostExpansion> {
        None
    }
    fn final_cost_expansion(
        &self,
        _x: &DVector<f64>,
        _cov: &DMatrix<f64>,
    ) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        None
    }

    fn set_stochasticity_weight(&self, _weight: f64) {}
}

/// Belief trajectory: `T + 1` beliefs, `T` flat controls and the costs.
#[derive(Debug, Clone)]
pub struct BeliefTrajectory {
    pub beliefs: Vec<GaussianBelief>,
    pub controls: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    pub final_cost: f64,
    pub total_cost: f64,
}

impl BeliefTrajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Quadratic-in-mean, linear-in-covariance value model.
#[derive(Debug, Clone)]
pub struct BeliefValueExpansion {
    pub v: f64,
    pub vx: DVector<f64>,
    pub vxx: DMatrix<f64>,
    /// Gradient with respect to the column-stacked covariance.
    pub vsigma: DVector<f64>,
}

impl BeliefValueExpansion {
    pub fn eval(&self, dx: &DVector<f64>, dcov: &DMatrix<f64>) -> f64 {
        let flat = DVector::from_column_slice(dcov.as_slice());
        self.v + self.vx.dot(dx) + 0.5 * (&self.vxx * dx).dot(dx) + self.vsigma.dot(&flat)
    }
}

fn mean_jacobian_a<P: BeliefProblem>(
    problem: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    if let Some((a, _)) = problem.mean_jacobians(x, u) {
        return Ok(a);
    }
    numdiff::finite_diff_jacobian(|xs| problem.mean_dynamics(xs, u), x, step)
}

fn obs_jacobian_h<P: BeliefProblem>(
    problem: &P,
    x: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    if let Some(h) = problem.obs_jacobian(x) {
        return Ok(h);
    }
    numdiff::finite_diff_jacobian(|xs| problem.observe(xs), x, step)
}

/// One EKF step. With `observation: None` (planning mode) the innovation is
/// zero and the mean is simply pushed through the dynamics; the covariance
/// update runs either way. Returns a repaired belief.
pub fn ekf_step<P: BeliefProblem>(
    problem: &P,
    belief: &GaussianBelief,
    u: &DVector<f64>,
    observation: Option<&DVector<f64>>,
    jacobian_step: f64,
) -> Result<GaussianBelief> {
    let a = mean_jacobian_a(problem, &belief.mean, u, jacobian_step)?;
    let predicted_mean = problem.mean_dynamics(&belief.mean, u);
    let mut cov_pred =
        &a * &belief.cov * a.transpose() + problem.process_noise(&belief.mean, u);
    numdiff::symmetrize(&mut cov_pred);

    let h = obs_jacobian_h(problem, &predicted_mean, jacobian_step)?;
    let mut s = &h * &cov_pred * h.transpose() + problem.obs_noise(&predicted_mean);
    numdiff::symmetrize(&mut s);
    let s_chol = Cholesky::new(s).ok_or(Error::FilterFailure)?;
    // K = cov_pred H' S^{-1}; cov_pred and S are symmetric.
    let gain = s_chol.solve(&(&h * &cov_pred)).transpose();

    let mean = match observation {
        Some(z) => &predicted_mean + &gain * (z - problem.observe(&predicted_mean)),
        None => predicted_mean,
    };
    let n = belief.dim();
    let cov = (DMatrix::identity(n, n) - &gain * &h) * cov_pred;
    if !mean.iter().all(|v| v.is_finite()) || !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::FilterFailure);
    }
    Ok(GaussianBelief::new(mean, cov))
}

/// One-step EKF covariance map `(x, u, cov) -> cov'` without the PSD repair
/// (used for finite-difference probes and greedy lookahead).
pub fn ekf_covariance_map<P: BeliefProblem>(
    problem: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
    cov: &DMatrix<f64>,
    jacobian_step: f64,
) -> Result<DMatrix<f64>> {
    let a = mean_jacobian_a(problem, x, u, jacobian_step)?;
    let predicted_mean = problem.mean_dynamics(x, u);
    let mut cov_pred = &a * cov * a.transpose() + problem.process_noise(x, u);
    numdiff::symmetrize(&mut cov_pred);
    let h = obs_jacobian_h(problem, &predicted_mean, jacobian_step)?;
    let mut s = &h * &cov_pred * h.transpose() + problem.obs_noise(&predicted_mean);
    numdiff::symmetrize(&mut s);
    let s_chol = Cholesky::new(s).ok_or(Error::FilterFailure)?;
    let gain = s_chol.solve(&(&h * &cov_pred)).transpose();
    let n = x.len();
    let mut out = (DMatrix::identity(n, n) - &gain * &h) * cov_pred;
    numdiff::symmetrize(&mut out);
    Ok(out)
}

/// EKF rollout in planning mode.
pub fn rollout_beliefs<P: BeliefProblem>(
    problem: &P,
    b0: &GaussianBelief,
    controls: &[DVector<f64>],
    jacobian_step: f64,
) -> Result<BeliefTrajectory> {
    let mut beliefs = Vec::with_capacity(controls.len() + 1);
    let mut stage_costs = Vec::with_capacity(controls.len());
    let mut b = b0.clone();
    beliefs.push(b.clone());
    for u in controls {
        stage_costs.push(problem.running_cost(&b.mean, u, &b.cov));
        b = ekf_step(problem, &b, u, None, jacobian_step)?;
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

pub(crate) fn belief_recost<P: BeliefProblem>(problem: &P, traj: &mut BeliefTrajectory) {
    for t in 0..traj.horizon() {
        traj.stage_costs[t] =
            problem.running_cost(&traj.beliefs[t].mean, &traj.controls[t], &traj.beliefs[t].cov);
    }
    let last = traj.beliefs.last().unwrap();
    traj.final_cost = problem.final_cost(&last.mean, &last.cov);
    traj.total_cost = traj.stage_costs.iter().sum::<f64>() + traj.final_cost;
}

/// Gradient of a scalar in the covariance argument, entry by entry, then
/// symmetrized and column-stacked.
fn cov_gradient<F>(f: F, cov: &DMatrix<f64>, step: f64) -> Result<DVector<f64>>
where
    F: Fn(&DMatrix<f64>) -> f64,
{
    let n = cov.nrows();
    let mut grad = DMatrix::zeros(n, n);
    let mut probe = cov.clone();
    for j in 0..n {
        for i in 0..n {
            let h = step * cov[(i, j)].abs().max(1.0);
            probe[(i, j)] = cov[(i, j)] + h;
            let fp = f(&probe);
            probe[(i, j)] = cov[(i, j)] - h;
            let fm = f(&probe);
            probe[(i, j)] = cov[(i, j)];
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::DifferentiationFailure { coordinate: j * n + i });
            }
            grad[(i, j)] = (fp - fm) / (2.0 * h);
        }
    }
    numdiff::symmetrize(&mut grad);
    Ok(DVector::from_column_slice(grad.as_slice()))
}

/// Per-step derivative bundle for the belief backward pass.
pub(crate) struct BeliefStepDerivs {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub cexp: CostExpansion,
    /// d vec(cov') / d vec(cov)
    pub t_ss: DMatrix<f64>,
    /// d vec(cov') / d mean
    pub t_sx: DMatrix<f64>,
    /// d vec(cov') / d control
    pub t_su: DMatrix<f64>,
    /// d cost / d vec(cov), symmetrized
    pub d_cov: DVector<f64>,
}

pub(crate) fn belief_step_derivs<P: BeliefProblem>(
    problem: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
    cov: &DMatrix<f64>,
    config: &SolverConfig,
) -> Result<BeliefStepDerivs> {
    let n = problem.state_dim();
    let nn = n * n;
    let step = config.jacobian_step;

    let (a, b) = match problem.mean_jacobians(x, u) {
        Some(j) => j,
        None => {
            let a = numdiff::finite_diff_jacobian(|xs| problem.mean_dynamics(xs, u), x, step)?;
            let b = numdiff::finite_diff_jacobian(|us| problem.mean_dynamics(x, us), u, step)?;
            (a, b)
        }
    };

    let cexp = match problem.cost_expansion(x, u, cov) {
        Some(e) => e,
        None => numdiff::quadratize_cost(
            |xs, us| problem.running_cost(xs, us, cov),
            x,
            u,
            step,
            config.hessian_step,
        )?,
    };

    let d_cov = cov_gradient(|c| problem.running_cost(x, u, c), cov, step)?;

    // Covariance-in, covariance-out derivative with the linearization
    // matrices frozen at the nominal: only linear algebra per probe.
    let predicted_mean = problem.mean_dynamics(x, u);
    let m = problem.process_noise(x, u);
    let h = obs_jacobian_h(problem, &predicted_mean, step)?;
    let n_obs = problem.obs_noise(&predicted_mean);
    let frozen_map = |c: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut cov_pred = &a * c * a.transpose() + &m;
        numdiff::symmetrize(&mut cov_pred);
        let mut s = &h * &cov_pred * h.transpose() + &n_obs;
        numdiff::symmetrize(&mut s);
        let s_chol = Cholesky::new(s).ok_or(Error::FilterFailure)?;
        let gain = s_chol.solve(&(&h * &cov_pred)).transpose();
        Ok((DMatrix::identity(n, n) - &gain * &h) * cov_pred)
    };

    let mut t_ss = DMatrix::zeros(nn, nn);
    let mut probe = cov.clone();
    for col in 0..nn {
        let (i, j) = (col % n, col / n);
        let hstep = step * cov[(i, j)].abs().max(1.0);
        probe[(i, j)] = cov[(i, j)] + hstep;
        let gp = frozen_map(&probe)?;
        probe[(i, j)] = cov[(i, j)] - hstep;
        let gm = frozen_map(&probe)?;
        probe[(i, j)] = cov[(i, j)];
        let diff = (gp - gm) / (2.0 * hstep);
        t_ss.set_column(col, &DVector::from_column_slice(diff.as_slice()));
    }

    // Mean and control derivatives re-linearize the filter at each probe.
    let mut t_sx = DMatrix::zeros(nn, n);
    let mut xp = x.clone();
    for k in 0..n {
        let hstep = step * x[k].abs().max(1.0);
        xp[k] = x[k] + hstep;
        let gp = ekf_covariance_map(problem, &xp, u, cov, step)?;
        xp[k] = x[k] - hstep;
        let gm = ekf_covariance_map(problem, &xp, u, cov, step)?;
        xp[k] = x[k];
        let diff = (gp - gm) / (2.0 * hstep);
        t_sx.set_column(k, &DVector::from_column_slice(diff.as_slice()));
    }

    let nu = u.len();
    let mut t_su = DMatrix::zeros(nn, nu);
    let mut up = u.clone();
    for k in 0..nu {
        let hstep = step * u[k].abs().max(1.0);
        up[k] = u[k] + hstep;
        let gp = ekf_covariance_map(problem, x, &up, cov, step)?;
        up[k] = u[k] - hstep;
        let gm = ekf_covariance_map(problem, x, &up, cov, step)?;
        up[k] = u[k];
        let diff = (gp - gm) / (2.0 * hstep);
        t_su.set_column(k, &DVector::from_column_slice(diff.as_slice()));
    }

    Ok(BeliefStepDerivs {
        a,
        b,
        cexp,
        t_ss,
        t_sx,
        t_su,
        d_cov,
    })
}

fn symmetrized_sigma(vec: DVector<f64>, n: usize) -> DVector<f64> {
    let mut m = DMatrix::from_column_slice(n, n, vec.as_slice());
    numdiff::symmetrize(&mut m);
    DVector::from_column_slice(m.as_slice())
}

fn final_belief_expansion<P: BeliefProblem>(
    problem: &P,
    belief: &GaussianBelief,
    config: &SolverConfig,
) -> Result<BeliefValueExpansion> {
    let (v, vx, vxx) = match problem.final_cost_expansion(&belief.mean, &belief.cov) {
        Some(e) => e,
        None => {
            let v = problem.final_cost(&belief.mean, &belief.cov);
            let vx = numdiff::finite_diff_gradient(
                |xs| problem.final_cost(xs, &belief.cov),
                &belief.mean,
                config.jacobian_step,
            )?;
            let mut vxx = numdiff::finite_diff_hessian(
                |xs| problem.final_cost(xs, &belief.cov),
                &belief.mean,
                config.hessian_step,
            )?;
            numdiff::symmetrize(&mut vxx);
            (v, vx, vxx)
        }
    };
    let vsigma = cov_gradient(
        |c| problem.final_cost(&belief.mean, c),
        &belief.cov,
        config.jacobian_step,
    )?;
    Ok(BeliefValueExpansion { v, vx, vxx, vsigma })
}

/// Backward pass over a nominal belief trajectory.
pub fn belief_backward_pass<P: BeliefProblem>(
    problem: &P,
    nominal: &BeliefTrajectory,
    reg: f64,
    config: &SolverConfig,
    warm: Option<&FeedbackPolicy>,
) -> Result<(FeedbackPolicy, (f64, f64))> {
    let horizon = nominal.horizon();
    let n = problem.state_dim();
    let bounds = problem.bounds();
    let fail = |t: usize, e: Error| Error::BackwardPassFailure {
        timestep: t,
        source: Box::new(e),
    };

    let mut value = final_belief_expansion(problem, &nominal.beliefs[horizon], config)
        .map_err(|e| fail(horizon, e))?;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    let mut steps = Vec::with_capacity(horizon);

    for t in (0..horizon).rev() {
        let belief = &nominal.beliefs[t];
        let u = &nominal.controls[t];
        let derivs = belief_step_derivs(problem, &belief.mean, u, &belief.cov, config)
            .map_err(|e| fail(t, e))?;
        let cuu = numdiff::clamp_eigenvalues(&derivs.cexp.cuu, config.cuu_floor);

        let q = QExpansion {
            qx: &derivs.cexp.cx + derivs.a.transpose() * &value.vx + derivs.t_sx.transpose() * &value.vsigma,
            qu: &derivs.cexp.cu + derivs.b.transpose() * &value.vx + derivs.t_su.transpose() * &value.vsigma,
            qxx: {
                let mut m = &derivs.cexp.cxx + derivs.a.transpose() * &value.vxx * &derivs.a;
                numdiff::symmetrize(&mut m);
                m
            },
            quu: {
                let mut m = cuu + derivs.b.transpose() * &value.vxx * &derivs.b;
                numdiff::symmetrize(&mut m);
                m
            },
            qux: &derivs.cexp.cux + derivs.b.transpose() * &value.vxx * &derivs.a,
        };
        if q.qu.iter().any(|v| !v.is_finite()) || q.quu.iter().any(|v| !v.is_finite()) {
            return Err(fail(t, Error::QpFailure {
                reason: "non-finite Q expansion".into(),
            }));
        }

        let groups = belief_simplex_groups(problem, u);
        let warm_k = warm.and_then(|w| w.steps.get(t)).map(|s| &s.k);
        let (step, sd1, sd2) = gains_from_q(
            &q,
            &bounds.lower,
            &bounds.upper,
            groups,
            u,
            reg,
            warm_k,
        )
        .map_err(|e| fail(t, e))?;
        d1 += sd1;
        d2 += sd2;

        let (vx, vxx) = value_update(&q, &step);
        let vsigma = symmetrized_sigma(
            &derivs.d_cov + derivs.t_ss.transpose() * &value.vsigma,
            n,
        );
        value = BeliefValueExpansion {
            v: value.v + nominal.stage_costs[t],
            vx,
            vxx,
            vsigma,
        };
        steps.push(step);
    }
    steps.reverse();
    Ok((FeedbackPolicy { steps }, (d1, d2)))
}

fn belief_simplex_groups<P: BeliefProblem>(
    problem: &P,
    nominal_u: &DVector<f64>,
) -> Vec<crate::boxqp::SimplexGroup> {
    problem
        .simplex_groups()
        .into_iter()
        .map(|indices| {
            let sum: f64 = indices.iter().map(|&i| nominal_u[i]).sum();
            crate::boxqp::SimplexGroup {
                indices,
                sum_target: 1.0 - sum,
            }
        })
        .collect()
}

/// Forward pass with EKF belief propagation (zero innovation).
pub fn belief_forward_pass<P: BeliefProblem>(
    problem: &P,
    nominal: &BeliefTrajectory,
    policy: &FeedbackPolicy,
    alpha: f64,
    config: &SolverConfig,
) -> Result<BeliefTrajectory> {
    let horizon = nominal.horizon();
    let bounds = problem.bounds();
    let groups = problem.simplex_groups();

    let mut beliefs = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut stage_costs = Vec::with_capacity(horizon);
    let mut b = nominal.beliefs[0].clone();
    beliefs.push(b.clone());

    for t in 0..horizon {
        let dx = &b.mean - &nominal.beliefs[t].mean;
        let step = &policy.steps[t];
        let mut u = &nominal.controls[t] + &step.k * alpha + &step.k_mat * dx;
        bounds.clamp(&mut u);
        for g in &groups {
            normalize_probabilities_in_place(&mut u, g);
        }
        stage_costs.push(problem.running_cost(&b.mean, &u, &b.cov));
        b = ekf_step(problem, &b, &u, None, config.jacobian_step)
            .map_err(|_| Error::ForwardDiverged { timestep: t })?;
        beliefs.push(b.clone());
        controls.push(u);
    }
    let final_cost = problem.final_cost(&b.mean, &b.cov);
    let total_cost = stage_costs.iter().sum::<f64>() + final_cost;
    if !total_cost.is_finite() {
        return Err(Error::ForwardDiverged { timestep: horizon });
    }
    Ok(BeliefTrajectory {
        beliefs,
        controls,
        stage_costs,
        final_cost,
        total_cost,
    })
}

#[derive(Debug)]
pub struct BeliefDdpResult {
    pub trajectory: BeliefTrajectory,
    pub policy: FeedbackPolicy,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

/// Belief-space analogue of the fully observable optimizer loop.
pub fn belief_optimize<P: BeliefProblem>(
    problem: &P,
    config: &SolverConfig,
    b0: &GaussianBelief,
    initial_controls: &[DVector<f64>],
    mut schedule: Option<&mut CstSchedule>,
) -> Result<BeliefDdpResult> {
    if let Some(s) = schedule.as_deref_mut() {
        problem.set_stochasticity_weight(s.value());
    }
    let mut nominal = rollout_beliefs(problem, b0, initial_controls, config.jacobian_step)?;
    let mut reg = config.reg_init;
    let mut log = Vec::new();
    let mut converged = false;
    let mut policy = FeedbackPolicy::default();

    for iteration in 1..=config.max_iterations {
        let (new_policy, (d1, d2)) = loop {
            match belief_backward_pass(problem, &nominal, reg, config, Some(&policy)) {
                Ok(r) => break r,
                Err(_) if reg < config.reg_max => {
                    reg = (reg * config.reg_scale).max(config.reg_min)
                }
                Err(e) => {
                    if policy.steps.is_empty() {
                        return Err(e);
                    }
                    return Ok(BeliefDdpResult {
                        trajectory: nominal,
                        policy,
                        log,
                        converged: false,
                    });
                }
            }
        };
        policy = new_policy;

        let schedule_done = schedule.as_deref().map(|s| s.at_max()).unwrap_or(true);
        if schedule_done && -(d1 + d2) < config.tol_decrease {
            converged = true;
            break;
        }

        let mut accepted: Option<(BeliefTrajectory, f64, f64)> = None;
        for &alpha in &config.alphas {
            let Ok(candidate) = belief_forward_pass(problem, &nominal, &policy, alpha, config)
            else {
                continue;
            };
            let dcost = nominal.total_cost - candidate.total_cost;
            let expected = -(alpha * d1 + alpha * alpha * d2);
            let ok = if expected > 0.0 {
                dcost > config.acceptance_ratio * expected
            } else {
                dcost > 0.0
            };
            if ok {
                accepted = Some((candidate, alpha, dcost));
                break;
            }
        }

        let cst_value = schedule.as_deref().map(|s| s.value()).unwrap_or(0.0);
        let decrease = match accepted {
            Some((candidate, alpha, dcost)) => {
                nominal = candidate;
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
                    cst: cst_value,
                    accepted: true,
                });
                dcost
            }
            None => {
                reg = (reg * config.reg_scale).max(config.reg_min);
                log.push(IterationRecord {
                    iteration,
                    total_cost: nominal.total_cost,
                    alpha: 0.0,
                    regularization: reg,
                    cst: cst_value,
                    accepted: false,
                });
                if reg > config.reg_max {
                    break;
                }
                0.0
            }
        };

        match schedule.as_deref_mut() {
            Some(s) => {
                let changed = s.update(decrease, iteration, config.max_iterations);
                if changed {
                    problem.set_stochasticity_weight(s.value());
                    belief_recost(problem, &mut nominal);
                } else if s.at_max()
                    && log.last().is_some_and(|r| r.accepted)
                    && decrease < config.tol_decrease
                {
                    converged = true;
                    break;
                }
            }
            None => {
                if log.last().is_some_and(|r| r.accepted) && decrease < config.tol_decrease {
                    converged = true;
                    break;
                }
            }
        }
    }

    if let Ok((final_policy, _)) =
        belief_backward_pass(problem, &nominal, reg.max(config.reg_min), config, Some(&policy))
    {
        policy = final_policy;
    }

    Ok(BeliefDdpResult {
        trajectory: nominal,
        policy,
        log,
        converged,
    })
}

/// Draw from `N(0, cov)` for PSD (possibly singular) covariances.
pub fn sample_gaussian(cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = cov.nrows();
    let mut sym = cov.clone();
    numdiff::symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let mut z = DVector::zeros(n);
    for i in 0..n {
        let std: f64 = eig.eigenvalues[i].max(0.0).sqrt();
        let xi: f64 = StandardNormal.sample(rng);
        z[i] = std * xi;
    }
    &eig.eigenvectors * z
}

/// Realized closed-loop run.
#[derive(Debug, Clone)]
pub struct ClosedLoopRecord {
    pub true_states: Vec<DVector<f64>>,
    pub beliefs: Vec<GaussianBelief>,
    pub controls: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    pub final_cost: f64,
    pub total_cost: f64,
}

/// Everything a closed-loop run needs besides the plan itself. The pieces
/// are closures so the executed discrete action (per-step sequences, argmax
/// of a probability block, or a perimeter coordinate) stays the caller's
/// business.
pub struct ClosedLoopModel<'a> {
    pub bounds: ControlBounds,
    pub simplex_groups: Vec<Vec<usize>>,
    /// Advance the true state: `(x_true, belief_mean, u, rng) -> next`.
    /// Samples its own process noise and may model contact misses.
    pub execute: Box<dyn FnMut(&DVector<f64>, &DVector<f64>, &DVector<f64>, &mut ChaCha8Rng) -> DVector<f64> + 'a>,
    /// Sample a noisy observation of the true state.
    pub observe: Box<dyn FnMut(&DVector<f64>, &mut ChaCha8Rng) -> DVector<f64> + 'a>,
    /// EKF update with innovation: `(t, belief, u, z) -> belief`.
    pub filter: Box<dyn FnMut(usize, &GaussianBelief, &DVector<f64>, &DVector<f64>) -> Result<GaussianBelief> + 'a>,
    /// Realized stage cost on the true state and current belief covariance.
    pub stage_cost: Box<dyn FnMut(&DVector<f64>, &DVector<f64>, &DMatrix<f64>) -> f64 + 'a>,
    pub final_cost: Box<dyn FnMut(&DVector<f64>, &DMatrix<f64>) -> f64 + 'a>,
}

/// Execute the planned policy against a sampled true state.
///
/// Per step the executed control is `u_bar + k + K (mean - mean_bar)`,
/// clamped and renormalized; the true state advances through the model's
/// `execute`, and a sampled observation updates the belief with a nonzero
/// innovation. Fixed seeds give bit-identical runs.
pub fn simulate_closed_loop(
    nominal: &BeliefTrajectory,
    policy: &FeedbackPolicy,
    initial_true_state: DVector<f64>,
    model: &mut ClosedLoopModel<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<ClosedLoopRecord> {
    let horizon = nominal.horizon();
    let mut belief = nominal.beliefs[0].clone();
    let mut x_true = initial_true_state;
    let mut true_states = vec![x_true.clone()];
    let mut beliefs = vec![belief.clone()];
    let mut controls = Vec::with_capacity(horizon);
    let mut stage_costs = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let step = &policy.steps[t];
        let dx = &belief.mean - &nominal.beliefs[t].mean;
        let mut u = &nominal.controls[t] + &step.k + &step.k_mat * dx;
        model.bounds.clamp(&mut u);
        for g in &model.simplex_groups {
            normalize_probabilities_in_place(&mut u, g);
        }
        stage_costs.push((model.stage_cost)(&x_true, &u, &belief.cov));

        x_true = (model.execute)(&x_true, &belief.mean, &u, rng);
        if !x_true.iter().all(|v| v.is_finite()) {
            return Err(Error::ForwardDiverged { timestep: t });
        }
        let z = (model.observe)(&x_true, rng);
        belief = (model.filter)(t, &belief, &u, &z)?;

        true_states.push(x_true.clone());
        beliefs.push(belief.clone());
        controls.push(u);
    }
    let fc = (model.final_cost)(&x_true, &belief.cov);
    let total_cost = stage_costs.iter().sum::<f64>() + fc;
    Ok(ClosedLoopRecord {
        true_states,
        beliefs,
        controls,
        stage_costs,
        final_cost: fc,
        total_cost,
    })
}

/// Standard model wiring for problems whose executed action is already
/// encoded in the flat control: plain dynamics plus sampled process and
/// observation noise, with this problem's own EKF as the filter.
pub fn closed_loop_model<P: BeliefProblem>(problem: &P, jacobian_step: f64) -> ClosedLoopModel<'_> {
    ClosedLoopModel {
        bounds: problem.bounds(),
        simplex_groups: problem.simplex_groups(),
        execute: Box::new(move |x, _, u, rng| {
            problem.mean_dynamics(x, u) + sample_gaussian(&problem.process_noise(x, u), rng)
        }),
        observe: Box::new(move |x, rng| {
            problem.observe(x) + sample_gaussian(&problem.obs_noise(x), rng)
        }),
        filter: Box::new(move |_, b, u, z| ekf_step(problem, b, u, Some(z), jacobian_step)),
        stage_cost: Box::new(move |x, u, cov| problem.running_cost(x, u, cov)),
        final_cost: Box::new(move |x, cov| problem.final_cost(x, cov)),
    }
}

/// Backward/forward passes for the greedy and interpolated baselines under
/// partial observability; driven by `hybrid::optimize_switched_belief`.
pub(crate) mod switched_belief_passes {
    use super::*;
    use crate::hybrid::{greedy_belief_action_choice, FixedActionBelief};
    use crate::problem::HybridProblem;

    pub(crate) struct SwitchedBeliefBackward {
        pub policy: FeedbackPolicy,
        pub new_actions: Vec<usize>,
        pub d1: f64,
        pub d2: f64,
    }

    pub(crate) fn backward<P: HybridProblem>(
        problem: &P,
        nominal: &BeliefTrajectory,
        actions: &[usize],
        reg: f64,
        config: &SolverConfig,
        warm: Option<&FeedbackPolicy>,
    ) -> Result<SwitchedBeliefBackward> {
        let horizon = nominal.horizon();
        let n = problem.state_dim();
        let bounds = problem.continuous_bounds();
        let fail = |t: usize, e: Error| Error::BackwardPassFailure {
            timestep: t,
            source: Box::new(e),
        };

        let final_view = FixedActionBelief {
            base: problem,
            action: actions[horizon - 1],
        };
        let mut value = final_belief_expansion(&final_view, &nominal.beliefs[horizon], config)
            .map_err(|e| fail(horizon, e))?;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        let mut steps = Vec::with_capacity(horizon);
        let mut new_actions = vec![0usize; horizon];

        for t in (0..horizon).rev() {
            let belief = &nominal.beliefs[t];
            let u = &nominal.controls[t];
            let chosen = greedy_belief_action_choice(
                problem,
                belief,
                u,
                actions[t],
                &nominal.beliefs[t + 1],
                &value,
                config.jacobian_step,
            );
            new_actions[t] = chosen;

            let view = FixedActionBelief {
                base: problem,
                action: chosen,
            };
            let derivs = belief_step_derivs(&view, &belief.mean, u, &belief.cov, config)
                .map_err(|e| fail(t, e))?;
            let cuu = numdiff::clamp_eigenvalues(&derivs.cexp.cuu, config.cuu_floor);

            let q = QExpansion {
                qx: &derivs.cexp.cx
                    + derivs.a.transpose() * &value.vx
                    + derivs.t_sx.transpose() * &value.vsigma,
                qu: &derivs.cexp.cu
                    + derivs.b.transpose() * &value.vx
                    + derivs.t_su.transpose() * &value.vsigma,
                qxx: {
                    let mut mm = &derivs.cexp.cxx + derivs.a.transpose() * &value.vxx * &derivs.a;
                    numdiff::symmetrize(&mut mm);
                    mm
                },
                quu: {
                    let mut mm = cuu + derivs.b.transpose() * &value.vxx * &derivs.b;
                    numdiff::symmetrize(&mut mm);
                    mm
                },
                qux: &derivs.cexp.cux + derivs.b.transpose() * &value.vxx * &derivs.a,
            };

            let warm_k = warm.and_then(|w| w.steps.get(t)).map(|s| &s.k);
            let (step, sd1, sd2) =
                gains_from_q(&q, &bounds.lower, &bounds.upper, vec![], u, reg, warm_k)
                    .map_err(|e| fail(t, e))?;
            d1 += sd1;
            d2 += sd2;

            let (vx, vxx) = value_update(&q, &step);
            let vsigma = symmetrized_sigma(
                &derivs.d_cov + derivs.t_ss.transpose() * &value.vsigma,
                n,
            );
            value = BeliefValueExpansion {
                v: value.v + nominal.stage_costs[t],
                vx,
                vxx,
                vsigma,
            };
            steps.push(step);
        }
        steps.reverse();
        Ok(SwitchedBeliefBackward {
            policy: FeedbackPolicy { steps },
            new_actions,
            d1,
            d2,
        })
    }

    pub(crate) fn forward<P: HybridProblem>(
        problem: &P,
        nominal: &BeliefTrajectory,
        actions: &[usize],
        policy: &FeedbackPolicy,
        alpha: f64,
    ) -> Result<BeliefTrajectory> {
        let horizon = nominal.horizon();
        let bounds = problem.continuous_bounds();
        let mut beliefs = Vec::with_capacity(horizon + 1);
        let mut controls = Vec::with_capacity(horizon);
        let mut stage_costs = Vec::with_capacity(horizon);
        let mut b = nominal.beliefs[0].clone();
        beliefs.push(b.clone());
        for t in 0..horizon {
            let dx = &b.mean - &nominal.beliefs[t].mean;
            let step = &policy.steps[t];
            let mut u = &nominal.controls[t] + &step.k * alpha + &step.k_mat * dx;
            bounds.clamp(&mut u);
            stage_costs.push(problem.running_cost(&b.mean, &u, actions[t], &b.cov));
            let view = FixedActionBelief {
                base: problem,
                action: actions[t],
            };
            b = ekf_step(&view, &b, &u, None, numdiff::DEFAULT_STEP)
                .map_err(|_| Error::ForwardDiverged { timestep: t })?;
            beliefs.push(b.clone());
            controls.push(u);
        }
        let final_cost = problem.final_cost(&b.mean, &b.cov);
        let total_cost = stage_costs.iter().sum::<f64>() + final_cost;
        if !total_cost.is_finite() {
            return Err(Error::ForwardDiverged { timestep: horizon });
        }
        Ok(BeliefTrajectory {
            beliefs,
            controls,
            stage_costs,
            final_cost,
            total_cost,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;

    /// Scalar random-walk problem with tunable noise.
    struct Scalar {
        m: f64,
        n: f64,
    }

    impl BeliefProblem for Scalar {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn mean_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] + u[0]])
        }
        fn process_noise(&self, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, self.m)
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
        fn obs_noise(&self, _: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, self.n)
        }
        fn running_cost(&self, _: &DVector<f64>, u: &DVector<f64>, _: &DMatrix<f64>) -> f64 {
            u[0] * u[0]
        }
        fn final_cost(&self, x: &DVector<f64>, _: &DMatrix<f64>) -> f64 {
            x[0] * x[0]
        }
        fn bounds(&self) -> ControlBounds {
            ControlBounds::unbounded(1)
        }
    }

    #[test]
    fn ekf_scalar_hand_arithmetic() {
        // f(x) = x, M = 0.01, h(x) = x, N = 0.04, prior var 0.04:
        // predicted 0.05, gain 5/9, posterior 0.05 * 4/9.
        let p = Scalar { m: 0.01, n: 0.04 };
        let belief = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 0.04));
        let next = ekf_step(&p, &belief, &DVector::zeros(1), None, 1e-5).unwrap();
        assert_abs_diff_eq!(next.cov[(0, 0)], 0.05 * 4.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn uninformative_observation_keeps_predicted_covariance() {
        let p = Scalar { m: 0.0, n: 1e12 };
        let belief = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 0.25));
        let next = ekf_step(&p, &belief, &DVector::zeros(1), None, 1e-5).unwrap();
        assert_relative_eq!(next.cov[(0, 0)], 0.25, max_relative = 1e-6);
    }

    #[test]
    fn certainty_is_preserved_without_noise() {
        let p = Scalar { m: 0.0, n: 0.04 };
        let belief = GaussianBelief::certain(DVector::from_vec(vec![1.0]));
        let next = ekf_step(&p, &belief, &DVector::from_vec(vec![0.5]), None, 1e-5).unwrap();
        assert_eq!(next.cov[(0, 0)], 0.0);
        assert_abs_diff_eq!(next.mean[0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn covariances_stay_symmetric_psd_through_random_steps() {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(12);
        let p = Scalar { m: 0.01, n: 0.04 };
        // 2-dim variant exercised through a custom problem would be better,
        // but the scalar one already hits the repair path; check a batch.
        let mut belief =
            GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 0.5));
        for _ in 0..500 {
            let u = DVector::from_vec(vec![rng.random_range(-1.0..1.0)]);
            belief = ekf_step(&p, &belief, &u, None, 1e-5).unwrap();
            assert!(belief.cov[(0, 0)] >= 0.0);
        }
    }

    #[test]
    fn repair_clamps_negative_eigenvalues() {
        let mut b = GaussianBelief {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-7]),
        };
        b.repair();
        let eig = b.cov.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-15));
    }

    /// Control-dependent process noise with a final variance penalty: the
    /// optimizer must trade control effort against injected uncertainty.
    struct NoisyControl;

    impl BeliefProblem for NoisyControl {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn mean_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] + u[0]])
        }
        fn process_noise(&self, _: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, u[0] * u[0])
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
        fn obs_noise(&self, _: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 1e6)
        }
        fn running_cost(&self, _: &DVector<f64>, u: &DVector<f64>, _: &DMatrix<f64>) -> f64 {
            (u[0] - 1.0) * (u[0] - 1.0)
        }
        fn final_cost(&self, _: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
            cov[(0, 0)]
        }
        fn bounds(&self) -> ControlBounds {
            ControlBounds::new(
                DVector::from_vec(vec![-2.0]),
                DVector::from_vec(vec![2.0]),
            )
            .unwrap()
        }
    }

    #[test]
    fn variance_penalty_pulls_controls_down() {
        // Effectively separable: per step (u - 1)^2 + u^2, optimum u = 0.5.
        // A covariance-blind solution sits at u = 1. Exhaustive search over
        // constant controls is the oracle.
        let horizon = 3;
        let mut best_u = f64::NAN;
        let mut best_cost = f64::INFINITY;
        let mut k = 0;
        while k <= 2000 {
            let u = -1.0 + k as f64 * 1e-3;
            let controls = vec![DVector::from_vec(vec![u]); horizon];
            let traj = rollout_beliefs(
                &NoisyControl,
                &GaussianBelief::certain(DVector::zeros(1)),
                &controls,
                1e-5,
            )
            .unwrap();
            if traj.total_cost < best_cost {
                best_cost = traj.total_cost;
                best_u = u;
            }
            k += 1;
        }
        assert_abs_diff_eq!(best_u, 0.5, epsilon = 2e-3);

        let config = SolverConfig {
            max_iterations: 60,
            tol_decrease: 1e-10,
            ..SolverConfig::default()
        };
        let result = belief_optimize(
            &NoisyControl,
            &config,
            &GaussianBelief::certain(DVector::zeros(1)),
            &vec![DVector::from_vec(vec![1.0]); horizon],
            None,
        )
        .unwrap();
        for u in &result.trajectory.controls {
            assert_abs_diff_eq!(u[0], 0.5, epsilon = 1e-3);
        }
        assert!(result.trajectory.total_cost <= best_cost + 1e-6);
        // The covariance-blind choice u = 1 is strictly worse.
        let blind = rollout_beliefs(
            &NoisyControl,
            &GaussianBelief::certain(DVector::zeros(1)),
            &vec![DVector::from_vec(vec![1.0]); horizon],
            1e-5,
        )
        .unwrap();
        assert!(result.trajectory.total_cost < blind.total_cost);
    }

    #[test]
    fn accepted_belief_costs_are_monotone() {
        let config = SolverConfig {
            max_iterations: 40,
            ..SolverConfig::default()
        };
        let result = belief_optimize(
            &Scalar { m: 0.01, n: 0.04 },
            &config,
            &GaussianBelief::new(DVector::from_vec(vec![2.0]), DMatrix::from_element(1, 1, 0.1)),
            &vec![DVector::zeros(1); 8],
            None,
        )
        .unwrap();
        let costs: Vec<f64> = result
            .log
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.total_cost)
            .collect();
        assert!(!costs.is_empty());
        for w in costs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn closed_loop_zero_noise_matches_plan() {
        let p = Scalar { m: 0.0, n: 1e-4 };
        let b0 = GaussianBelief::certain(DVector::from_vec(vec![1.5]));
        let config = SolverConfig {
            max_iterations: 50,
            tol_decrease: 1e-12,
            ..SolverConfig::default()
        };
        let result =
            belief_optimize(&p, &config, &b0, &vec![DVector::zeros(1); 5], None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = closed_loop_model(&p, 1e-5);
        // No process noise in this run.
        model.execute = Box::new(|x, _, u, _| p.mean_dynamics(x, u));
        let record = simulate_closed_loop(
            &result.trajectory,
            &result.policy,
            b0.mean.clone(),
            &mut model,
            &mut rng,
        )
        .unwrap();
        // With zero process noise and a certain prior the filter gain is
        // zero: the realized run reproduces the alpha = 1 forward pass
        // exactly, and the plan itself to solver tolerance.
        let replay =
            belief_forward_pass(&p, &result.trajectory, &result.policy, 1.0, &config).unwrap();
        for (truth, planned) in record.true_states.iter().zip(replay.beliefs.iter()) {
            assert_abs_diff_eq!(truth[0], planned.mean[0], epsilon = 1e-12);
        }
        for (truth, planned) in record.true_states.iter().zip(result.trajectory.beliefs.iter()) {
            assert_abs_diff_eq!(truth[0], planned.mean[0], epsilon = 1e-4);
        }
    }

    #[test]
    fn closed_loop_runs_are_seed_deterministic() {
        let p = Scalar { m: 0.02, n: 0.05 };
        let b0 = GaussianBelief::new(
            DVector::from_vec(vec![1.0]),
            DMatrix::from_element(1, 1, 0.04),
        );
        let config = SolverConfig {
            max_iterations: 30,
            ..SolverConfig::default()
        };
        let result =
            belief_optimize(&p, &config, &b0, &vec![DVector::zeros(1); 6], None).unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = &b0.mean + sample_gaussian(&b0.cov, &mut rng);
            let mut model = closed_loop_model(&p, 1e-5);
            simulate_closed_loop(&result.trajectory, &result.policy, x0, &mut model, &mut rng)
                .unwrap()
        };
        let a = run(7);
        let b = run(7);
        let c = run(8);
        assert_eq!(a.total_cost.to_bits(), b.total_cost.to_bits());
        assert_ne!(a.total_cost.to_bits(), c.total_cost.to_bits());
    }
}
