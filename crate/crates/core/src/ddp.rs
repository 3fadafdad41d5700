//! Control-limited iLQG: quadratic value backward pass with QP forward
//! gains, line-searched forward pass, and a Levenberg-style regularization
//! schedule. Second-order dynamics derivatives are never formed.

use nalgebra::{DMatrix, DVector};

use crate::boxqp::{self, QpProblem, SimplexGroup};
use crate::hybrid::{normalize_probabilities_in_place, CstSchedule};
use crate::numdiff::{self, CostExpansion};
use crate::problem::{rollout, ControlProblem, Trajectory};
use crate::{Error, Result};

/// Quadratic value model at one timestep. `v` is the cost-to-go along the
/// nominal trajectory; `vx`/`vxx` are the local expansion.
#[derive(Debug, Clone)]
pub struct ValueExpansion {
    pub v: f64,
    pub vx: DVector<f64>,
    pub vxx: DMatrix<f64>,
}

impl ValueExpansion {
    /// Evaluate the quadratic model at a state deviation.
    pub fn eval(&self, dx: &DVector<f64>) -> f64 {
        self.v + self.vx.dot(dx) + 0.5 * (&self.vxx * dx).dot(dx)
    }
}

/// One-step value difference expansion.
#[derive(Debug, Clone)]
pub struct QExpansion {
    pub qx: DVector<f64>,
    pub qu: DVector<f64>,
    pub qxx: DMatrix<f64>,
    pub quu: DMatrix<f64>,
    pub qux: DMatrix<f64>,
}

/// Per-timestep affine policy `u = u_bar + alpha * k + K (x - x_bar)`.
#[derive(Debug, Clone)]
pub struct PolicyStep {
    pub k: DVector<f64>,
    pub k_mat: DMatrix<f64>,
    pub clamped: Vec<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct FeedbackPolicy {
    pub steps: Vec<PolicyStep>,
}

/// Solver settings. The line-search alphas form the geometric sequence
/// `1, 0.5, ..., 0.5^10`.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub horizon: usize,
    pub reg_init: f64,
    pub reg_scale: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub alphas: Vec<f64>,
    /// Stop once an accepted iteration decreases the cost by less than this.
    pub tol_decrease: f64,
    /// Accept a candidate when the actual decrease exceeds this fraction of
    /// the expected decrease.
    pub acceptance_ratio: f64,
    pub jacobian_step: f64,
    pub hessian_step: f64,
    /// Eigenvalue floor applied to the control block of the cost Hessian.
    pub cuu_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 400,
            horizon: 500,
            reg_init: 1e-6,
            reg_scale: 10.0,
            reg_min: 1e-6,
            reg_max: 1e10,
            alphas: (0..=10).map(|i| 0.5f64.powi(i)).collect(),
            tol_decrease: 1e-4,
            acceptance_ratio: 1e-4,
            jacobian_step: numdiff::DEFAULT_STEP,
            hessian_step: numdiff::DEFAULT_HESSIAN_STEP,
            cuu_floor: 1e-6,
        }
    }
}

impl SolverConfig {
    fn raise_reg(&self, reg: f64) -> f64 {
        (reg * self.reg_scale).max(self.reg_min)
    }

    fn lower_reg(&self, reg: f64) -> f64 {
        let r = reg / self.reg_scale;
        if r < self.reg_min {
            0.0
        } else {
            r
        }
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub total_cost: f64,
    pub alpha: f64,
    pub regularization: f64,
    pub cst: f64,
    pub accepted: bool,
}

#[derive(Debug)]
pub struct DdpResult {
    pub trajectory: Trajectory,
    pub policy: FeedbackPolicy,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

pub(crate) fn fd_dynamics_jacobians<P: ControlProblem>(
    problem: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
    step: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if let Some(j) = problem.dynamics_jacobians(x, u) {
        return Ok(j);
    }
    let a = numdiff::finite_diff_jacobian(|xs| problem.dynamics(xs, u), x, step)?;
    let b = numdiff::finite_diff_jacobian(|us| problem.dynamics(x, us), u, step)?;
    Ok((a, b))
}

fn stage_expansion<P: ControlProblem>(
    problem: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
    config: &SolverConfig,
) -> Result<CostExpansion> {
    if let Some(e) = problem.cost_expansion(x, u) {
        return Ok(e);
    }
    numdiff::quadratize_cost(
        |xs, us| problem.running_cost(xs, us),
        x,
        u,
        config.jacobian_step,
        config.hessian_step,
    )
}

fn final_expansion<P: ControlProblem>(
    problem: &P,
    x: &DVector<f64>,
    config: &SolverConfig,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    if let Some(e) = problem.final_cost_expansion(x) {
        return Ok(e);
    }
    let v = problem.final_cost(x);
    let vx = numdiff::finite_diff_gradient(|xs| problem.final_cost(xs), x, config.jacobian_step)?;
    let mut vxx =
        numdiff::finite_diff_hessian(|xs| problem.final_cost(xs), x, config.hessian_step)?;
    numdiff::symmetrize(&mut vxx);
    Ok((v, vx, vxx))
}

pub(crate) fn simplex_groups_for<P: ControlProblem>(
    problem: &P,
    nominal_u: &DVector<f64>,
) -> Vec<SimplexGroup> {
    problem
        .simplex_groups()
        .into_iter()
        .map(|indices| {
            let sum: f64 = indices.iter().map(|&i| nominal_u[i]).sum();
            SimplexGroup {
                indices,
                sum_target: 1.0 - sum,
            }
        })
        .collect()
}

/// Compute gains for one timestep given the Q expansion. Shared with the
/// belief backward pass and the greedy action passes.
pub(crate) fn gains_from_q(
    q: &QExpansion,
    bounds_lower: &DVector<f64>,
    bounds_upper: &DVector<f64>,
    groups: Vec<SimplexGroup>,
    nominal_u: &DVector<f64>,
    reg: f64,
    warm: Option<&DVector<f64>>,
) -> Result<(PolicyStep, f64, f64)> {
    let nu = q.qu.len();
    let quu_reg = &q.quu + DMatrix::identity(nu, nu) * reg;
    let qp = QpProblem {
        h: quu_reg,
        g: q.qu.clone(),
        lower: bounds_lower - nominal_u,
        upper: bounds_upper - nominal_u,
        simplex_groups: groups,
    };
    let zero = DVector::zeros(nu);
    let warm = warm.unwrap_or(&zero);
    let sol = if qp.simplex_groups.is_empty() {
        boxqp::solve_box(&qp, warm)?
    } else {
        boxqp::solve_box_simplex(&qp, warm)?
    };
    let k = sol.delta.clone();
    let k_mat = sol.solve_free_rows(&(-&q.qux));
    let d1 = k.dot(&q.qu);
    let d2 = 0.5 * (&q.quu * &k).dot(&k);
    Ok((
        PolicyStep {
            k,
            k_mat,
            clamped: sol.clamped,
        },
        d1,
        d2,
    ))
}

/// Value recursion with clamped-gain corrections.
pub(crate) fn value_update(q: &QExpansion, step: &PolicyStep) -> (DVector<f64>, DMatrix<f64>) {
    let k = &step.k;
    let km = &step.k_mat;
    let quu_k = &q.quu * k;
    let vx = &q.qx + km.transpose() * (&quu_k + &q.qu) + q.qux.transpose() * k;
    let mut vxx = &q.qxx
        + km.transpose() * &q.quu * km
        + km.transpose() * &q.qux
        + q.qux.transpose() * km;
    numdiff::symmetrize(&mut vxx);
    (vx, vxx)
}

/// Backward pass over a nominal trajectory.
///
/// Returns the time-varying policy together with the linear and quadratic
/// expected-decrease coefficients `(d1, d2)`; a line-search step `alpha`
/// predicts a decrease of `-(alpha * d1 + alpha^2 * d2)`.
pub fn backward_pass<P: ControlProblem>(
    problem: &P,
    nominal: &Trajectory,
    reg: f64,
    config: &SolverConfig,
    warm: Option<&FeedbackPolicy>,
) -> Result<(FeedbackPolicy, (f64, f64))> {
    let horizon = nominal.horizon();
    let bounds = problem.bounds();
    let fail = |t: usize, e: Error| Error::BackwardPassFailure {
        timestep: t,
        source: Box::new(e),
    };

    let (_, mut vx, mut vxx) =
        final_expansion(problem, &nominal.states[horizon], config).map_err(|e| fail(horizon, e))?;

    let mut d1 = 0.0;
    let mut d2 = 0.0;
    let mut steps: Vec<PolicyStep> = Vec::with_capacity(horizon);

    for t in (0..horizon).rev() {
        let x = &nominal.states[t];
        let u = &nominal.controls[t];
        let (a, b) =
            fd_dynamics_jacobians(problem, x, u, config.jacobian_step).map_err(|e| fail(t, e))?;
        let cexp = stage_expansion(problem, x, u, config).map_err(|e| fail(t, e))?;
        let cuu = numdiff::clamp_eigenvalues(&cexp.cuu, config.cuu_floor);

        let q = QExpansion {
            qx: &cexp.cx + a.transpose() * &vx,
            qu: &cexp.cu + b.transpose() * &vx,
            qxx: {
                let mut m = &cexp.cxx + a.transpose() * &vxx * &a;
                numdiff::symmetrize(&mut m);
                m
            },
            quu: {
                let mut m = cuu + b.transpose() * &vxx * &b;
                numdiff::symmetrize(&mut m);
                m
            },
            qux: &cexp.cux + b.transpose() * &vxx * &a,
        };
        if q.qu.iter().any(|v| !v.is_finite()) || q.quu.iter().any(|v| !v.is_finite()) {
            return Err(fail(t, Error::QpFailure {
                reason: "non-finite Q expansion".into(),
            }));
        }

        let groups = simplex_groups_for(problem, u);
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

        let (nvx, nvxx) = value_update(&q, &step);
        vx = nvx;
        vxx = nvxx;
        steps.push(step);
    }
    steps.reverse();
    Ok((FeedbackPolicy { steps }, (d1, d2)))
}

/// Simulate the policy from the nominal start state, clamping controls to
/// their bounds and renormalizing probability blocks.
pub fn forward_pass<P: ControlProblem>(
    problem: &P,
    nominal: &Trajectory,
    policy: &FeedbackPolicy,
    alpha: f64,
) -> Result<Trajectory> {
    let horizon = nominal.horizon();
    let bounds = problem.bounds();
    let groups = problem.simplex_groups();

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
        for g in &groups {
            normalize_probabilities_in_place(&mut u, g);
        }
        stage_costs.push(problem.running_cost(&x, &u));
        x = problem.dynamics(&x, &u);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::ForwardDiverged { timestep: t });
        }
        states.push(x.clone());
        controls.push(u);
    }
    let final_cost = problem.final_cost(&x);
    let total_cost = stage_costs.iter().sum::<f64>() + final_cost;
    if !total_cost.is_finite() {
        return Err(Error::ForwardDiverged { timestep: horizon });
    }
    Ok(Trajectory {
        states,
        controls,
        stage_costs,
        final_cost,
        total_cost,
    })
}

/// Recompute stage and final costs of a trajectory under the problem's
/// current cost function (used after the annealing weight changes).
pub(crate) fn recost<P: ControlProblem>(problem: &P, traj: &mut Trajectory) {
    for t in 0..traj.horizon() {
        traj.stage_costs[t] = problem.running_cost(&traj.states[t], &traj.controls[t]);
    }
    traj.final_cost = problem.final_cost(&traj.states[traj.horizon()]);
    traj.total_cost = traj.stage_costs.iter().sum::<f64>() + traj.final_cost;
}

/// Alternate backward and forward passes until convergence.
///
/// A candidate is accepted when its actual cost decrease is positive and
/// comparable to the predicted decrease. On acceptance the regularization
/// shrinks; on failure it grows, and the run aborts (flagged not converged)
/// when it exceeds its cap. When a [`CstSchedule`] is supplied, the
/// annealing weight is updated after every iteration and the run only
/// terminates on small decreases once the schedule has saturated.
pub fn optimize<P: ControlProblem>(
    problem: &P,
    config: &SolverConfig,
    x0: &DVector<f64>,
    initial_controls: &[DVector<f64>],
    mut schedule: Option<&mut CstSchedule>,
) -> Result<DdpResult> {
    if let Some(s) = schedule.as_deref_mut() {
        problem.set_stochasticity_weight(s.value());
    }
    let mut nominal = rollout(problem, x0, initial_controls)?;
    let mut reg = config.reg_init;
    let mut log = Vec::new();
    let mut converged = false;
    let mut policy = FeedbackPolicy::default();

    for iteration in 1..=config.max_iterations {
        // Backward pass, raising regularization until the QPs succeed.
        let (new_policy, (d1, d2)) = loop {
            match backward_pass(problem, &nominal, reg, config, Some(&policy)) {
                Ok(r) => break r,
                Err(_) if reg < config.reg_max => {
                    reg = config.raise_reg(reg);
                }
                Err(e) => {
                    if policy.steps.is_empty() {
                        return Err(e);
                    }
                    return Ok(DdpResult {
                        trajectory: nominal,
                        policy,
                        log,
                        converged: false,
                    });
                }
            }
        };
        policy = new_policy;

        // Nothing left to gain: the model predicts a negligible decrease.
        let schedule_done = schedule.as_deref().map(|s| s.at_max()).unwrap_or(true);
        if schedule_done && -(d1 + d2) < config.tol_decrease {
            converged = true;
            break;
        }

        let mut accepted: Option<(Trajectory, f64, f64)> = None;
        for &alpha in &config.alphas {
            let Ok(candidate) = forward_pass(problem, &nominal, &policy, alpha) else {
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
                reg = config.lower_reg(reg);
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
                reg = config.raise_reg(reg);
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
                    recost(problem, &mut nominal);
                } else if s.at_max() && log.last().is_some_and(|r| r.accepted) && decrease < config.tol_decrease {
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

    // Re-derive the policy around the final nominal trajectory so the
    // returned gains are consistent with it.
    if let Ok((final_policy, _)) = backward_pass(problem, &nominal, reg.max(config.reg_min), config, Some(&policy)) {
        policy = final_policy;
    }

    Ok(DdpResult {
        trajectory: nominal,
        policy,
        log,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ControlBounds;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Linear dynamics, quadratic costs, optional bounds. Analytic
    /// derivatives keep the LQR comparisons at machine precision.
    pub(crate) struct LinearQuadratic {
        pub a: DMatrix<f64>,
        pub b: DMatrix<f64>,
        pub q: DMatrix<f64>,
        pub r: DMatrix<f64>,
        pub qf: DMatrix<f64>,
        pub bounds: ControlBounds,
    }

    impl LinearQuadratic {
        pub fn random(rng: &mut StdRng, nx: usize, nu: usize) -> Self {
            let a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-0.6..0.6))
                + DMatrix::identity(nx, nx) * 0.5;
            let b = DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-1.0..1.0));
            let qh = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-0.5..0.5));
            let q = &qh * qh.transpose() + DMatrix::identity(nx, nx) * 0.1;
            let r = DMatrix::identity(nu, nu) * rng.random_range(0.5..2.0);
            let qf = &q * 3.0;
            Self {
                a,
                b,
                q,
                r,
                qf,
                bounds: ControlBounds::unbounded(nu),
            }
        }

        /// Discrete-time Riccati recursion: optimal feedback per step and
        /// the optimal cost from `x0`.
        pub fn riccati(&self, horizon: usize, x0: &DVector<f64>) -> (Vec<DMatrix<f64>>, f64) {
            let mut p = self.qf.clone();
            let mut gains = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let btp = self.b.transpose() * &p;
                let s = &self.r + &btp * &self.b;
                let k = s
                    .clone()
                    .cholesky()
                    .expect("Riccati curvature must be PD")
                    .solve(&(&btp * &self.a));
                let acl = &self.a - &self.b * &k;
                p = &self.q + k.transpose() * &self.r * &k + acl.transpose() * &p * &acl;
                gains.push(k);
            }
            gains.reverse();
            (gains, 0.5 * (&p * x0).dot(x0))
        }
    }

    impl ControlProblem for LinearQuadratic {
        fn state_dim(&self) -> usize {
            self.a.nrows()
        }
        fn control_dim(&self) -> usize {
            self.b.ncols()
        }
        fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            &self.a * x + &self.b * u
        }
        fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            0.5 * (&self.q * x).dot(x) + 0.5 * (&self.r * u).dot(u)
        }
        fn final_cost(&self, x: &DVector<f64>) -> f64 {
            0.5 * (&self.qf * x).dot(x)
        }
        fn bounds(&self) -> ControlBounds {
            self.bounds.clone()
        }
        fn dynamics_jacobians(
            &self,
            _x: &DVector<f64>,
            _u: &DVector<f64>,
        ) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
            Some((self.a.clone(), self.b.clone()))
        }
        fn cost_expansion(&self, x: &DVector<f64>, u: &DVector<f64>) -> Option<CostExpansion> {
            Some(CostExpansion {
                value: self.running_cost(x, u),
                cx: &self.q * x,
                cu: &self.r * u,
                cxx: self.q.clone(),
                cuu: self.r.clone(),
                cux: DMatrix::zeros(u.len(), x.len()),
            })
        }
        fn final_cost_expansion(
            &self,
            x: &DVector<f64>,
        ) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
            Some((self.final_cost(x), &self.qf * x, self.qf.clone()))
        }
    }

    fn zero_controls(nu: usize, horizon: usize) -> Vec<DVector<f64>> {
        vec![DVector::zeros(nu); horizon]
    }

    #[test]
    fn backward_pass_matches_riccati_gains() {
        let mut rng = StdRng::seed_from_u64(3);
        let lq = LinearQuadratic::random(&mut rng, 3, 2);
        let x0 = DVector::from_vec(vec![1.0, -0.5, 0.3]);
        let horizon = 12;
        let nominal = rollout(&lq, &x0, &zero_controls(2, horizon)).unwrap();
        let config = SolverConfig::default();
        let (policy, _) = backward_pass(&lq, &nominal, 0.0, &config, None).unwrap();
        let (riccati_gains, _) = lq.riccati(horizon, &x0);
        for t in 0..horizon {
            // The DDP feedback is the negated Riccati gain.
            assert_abs_diff_eq!(policy.steps[t].k_mat, -&riccati_gains[t], epsilon = 1e-9);
        }
    }

    #[test]
    fn backward_pass_zero_cost_gives_zero_gains() {
        struct Free;
        impl ControlProblem for Free {
            fn state_dim(&self) -> usize {
                2
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![x[0] + u[0], x[1] - u[0]])
            }
            fn running_cost(&self, _: &DVector<f64>, _: &DVector<f64>) -> f64 {
                0.0
            }
            fn final_cost(&self, _: &DVector<f64>) -> f64 {
                0.0
            }
            fn bounds(&self) -> ControlBounds {
                ControlBounds::unbounded(1)
            }
        }
        let nominal = rollout(&Free, &DVector::zeros(2), &zero_controls(1, 5)).unwrap();
        let (policy, (d1, d2)) =
            backward_pass(&Free, &nominal, 1e-6, &SolverConfig::default(), None).unwrap();
        for step in &policy.steps {
            assert_abs_diff_eq!(step.k.norm(), 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(step.k_mat.norm(), 0.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(d1, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d2, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_pass_one_step_hand_arithmetic() {
        // f = x + u, running cost u^2/2, final cost x^2/2, nominal x0 = 1,
        // u0 = 0. Then Q_u = 1, Q_uu = 2, k = -0.5, K = -0.5.
        struct OneDim;
        impl ControlProblem for OneDim {
            fn state_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![x[0] + u[0]])
            }
            fn running_cost(&self, _: &DVector<f64>, u: &DVector<f64>) -> f64 {
                0.5 * u[0] * u[0]
            }
            fn final_cost(&self, x: &DVector<f64>) -> f64 {
                0.5 * x[0] * x[0]
            }
            fn bounds(&self) -> ControlBounds {
                ControlBounds::unbounded(1)
            }
        }
        let nominal = rollout(&OneDim, &DVector::from_vec(vec![1.0]), &zero_controls(1, 1)).unwrap();
        let (policy, (d1, d2)) =
            backward_pass(&OneDim, &nominal, 0.0, &SolverConfig::default(), None).unwrap();
        assert_abs_diff_eq!(policy.steps[0].k[0], -0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(policy.steps[0].k_mat[(0, 0)], -0.5, epsilon = 1e-6);
        // Predicted decrease at alpha = 1 equals the true decrease 0.25.
        assert_abs_diff_eq!(-(d1 + d2), 0.25, epsilon = 1e-6);
    }

    #[test]
    fn forward_pass_alpha_zero_reproduces_nominal() {
        let mut rng = StdRng::seed_from_u64(11);
        let lq = LinearQuadratic::random(&mut rng, 2, 1);
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let nominal = rollout(&lq, &x0, &zero_controls(1, 6)).unwrap();
        let (policy, _) =
            backward_pass(&lq, &nominal, 0.0, &SolverConfig::default(), None).unwrap();
        let again = forward_pass(&lq, &nominal, &policy, 0.0).unwrap();
        // alpha = 0 and zero state deviation leave the controls unchanged.
        assert_abs_diff_eq!(again.total_cost, nominal.total_cost, epsilon = 1e-12);
        for (a, b) in again.controls.iter().zip(nominal.controls.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_pass_reaches_riccati_cost() {
        let mut rng = StdRng::seed_from_u64(21);
        let lq = LinearQuadratic::random(&mut rng, 3, 2);
        let x0 = DVector::from_vec(vec![0.8, -1.2, 0.4]);
        let horizon = 15;
        let nominal = rollout(&lq, &x0, &zero_controls(2, horizon)).unwrap();
        let (policy, _) =
            backward_pass(&lq, &nominal, 0.0, &SolverConfig::default(), None).unwrap();
        let candidate = forward_pass(&lq, &nominal, &policy, 1.0).unwrap();
        let (_, optimal) = lq.riccati(horizon, &x0);
        assert_relative_eq!(candidate.total_cost, optimal, max_relative = 1e-9);
    }

    #[test]
    fn forward_pass_clamps_to_bounds() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut lq = LinearQuadratic::random(&mut rng, 2, 1);
        lq.bounds = ControlBounds::new(
            DVector::from_vec(vec![-0.05]),
            DVector::from_vec(vec![0.05]),
        )
        .unwrap();
        let x0 = DVector::from_vec(vec![3.0, -2.0]);
        let nominal = rollout(&lq, &x0, &zero_controls(1, 8)).unwrap();
        let (policy, _) =
            backward_pass(&lq, &nominal, 1e-6, &SolverConfig::default(), None).unwrap();
        let candidate = forward_pass(&lq, &nominal, &policy, 1.0).unwrap();
        for u in &candidate.controls {
            assert!(u[0] >= -0.05 - 1e-12 && u[0] <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn optimize_converges_to_riccati_in_two_iterations() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..5 {
            let nx = rng.random_range(2..=4);
            let nu = rng.random_range(1..=2);
            let lq = LinearQuadratic::random(&mut rng, nx, nu);
            let x0 = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
            let horizon = 20;
            let (_, optimal) = lq.riccati(horizon, &x0);
            let config = SolverConfig {
                tol_decrease: 1e-9,
                ..SolverConfig::default()
            };
            let result = optimize(&lq, &config, &x0, &zero_controls(nu, horizon), None).unwrap();
            let accepted = result.log.iter().filter(|r| r.accepted).count();
            assert!(accepted <= 2, "took {accepted} accepted iterations");
            assert_relative_eq!(result.trajectory.total_cost, optimal, max_relative = 1e-6);
        }
    }

    #[test]
    fn optimize_terminates_immediately_when_optimal() {
        let mut rng = StdRng::seed_from_u64(17);
        let lq = LinearQuadratic::random(&mut rng, 2, 1);
        let x0 = DVector::from_vec(vec![0.5, -0.5]);
        let first = optimize(
            &lq,
            &SolverConfig::default(),
            &x0,
            &zero_controls(1, 10),
            None,
        )
        .unwrap();
        // Restart from the optimized controls: nothing left to gain.
        let config = SolverConfig::default();
        let second = optimize(&lq, &config, &x0, &first.trajectory.controls, None).unwrap();
        assert!(second.converged);
        let accepted = second.log.iter().filter(|r| r.accepted).count();
        assert!(accepted <= 1);
        assert_relative_eq!(
            second.trajectory.total_cost,
            first.trajectory.total_cost,
            max_relative = 1e-9
        );
    }

    #[test]
    fn accepted_costs_are_monotone() {
        let mut rng = StdRng::seed_from_u64(8);
        let lq = LinearQuadratic::random(&mut rng, 3, 2);
        let x0 = DVector::from_vec(vec![1.0, 1.0, -1.0]);
        let result = optimize(
            &lq,
            &SolverConfig::default(),
            &x0,
            &zero_controls(2, 12),
            None,
        )
        .unwrap();
        let costs: Vec<f64> = result
            .log
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.total_cost)
            .collect();
        for w in costs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn wide_bounds_match_unbounded_solution() {
        let mut rng = StdRng::seed_from_u64(31);
        let lq = LinearQuadratic::random(&mut rng, 3, 2);
        let mut wide = LinearQuadratic::random(&mut StdRng::seed_from_u64(31), 3, 2);
        wide.bounds = ControlBounds::new(
            DVector::from_element(2, -1e9),
            DVector::from_element(2, 1e9),
        )
        .unwrap();
        let x0 = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let free = optimize(
            &lq,
            &SolverConfig::default(),
            &x0,
            &zero_controls(2, 10),
            None,
        )
        .unwrap();
        let boxed = optimize(
            &wide,
            &SolverConfig::default(),
            &x0,
            &zero_controls(2, 10),
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(
            free.trajectory.total_cost,
            boxed.trajectory.total_cost,
            epsilon = 1e-6
        );
    }

    #[test]
    fn clamped_rows_of_feedback_are_zero() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut lq = LinearQuadratic::random(&mut rng, 2, 2);
        lq.bounds = ControlBounds::new(
            DVector::from_vec(vec![-0.01, -0.01]),
            DVector::from_vec(vec![0.01, 0.01]),
        )
        .unwrap();
        let x0 = DVector::from_vec(vec![5.0, -4.0]);
        let nominal = rollout(&lq, &x0, &zero_controls(2, 6)).unwrap();
        let (policy, _) =
            backward_pass(&lq, &nominal, 1e-6, &SolverConfig::default(), None).unwrap();
        let mut saw_clamp = false;
        for step in &policy.steps {
            for (i, &clamped) in step.clamped.iter().enumerate() {
                if clamped {
                    saw_clamp = true;
                    assert_eq!(step.k_mat.row(i).norm(), 0.0);
                }
            }
        }
        assert!(saw_clamp, "test problem expected to hit its control limits");
    }
}
