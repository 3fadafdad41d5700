//! Single-run and batch experiment execution.
//!
//! A run optimizes one environment instance with one method. Deterministic
//! environments report the cost of the resulting plan (for the mixture,
//! the extracted most-likely discrete plan re-simulated under the true
//! cost); stochastic environments plan once and report the mean realized
//! cost of seeded closed-loop simulations. Rows are merged by key, not
//! completion order, so batches are reproducible byte for byte.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::belief::{
    belief_optimize, closed_loop_model, ekf_step, sample_gaussian, simulate_closed_loop,
    BeliefTrajectory, ClosedLoopModel, GaussianBelief,
};
use crate::ddp::{self, IterationRecord, SolverConfig};
use crate::envs::box_push::{perimeter_split, STATE_DIM as BOX_DIM};
use crate::envs::car::ACTION_GEAR1;
use crate::envs::{sample_cf_grid, BoxContinuous, BoxParams, BoxProblem, CarContinuous, CarProblem};
use crate::harness::config::{derive_seed, EnvironmentId, ExperimentConfig, MethodId};
use crate::harness::export::TrajectoryExport;
use crate::hybrid::{
    extract_discrete_plan, initial_probabilities, optimize_switched, optimize_switched_belief,
    rollout_switched, BaselineMode, CstSchedule, FixedActionBelief, Mixture,
};
use crate::problem::HybridProblem;
use crate::{Error, Result};

/// One experiment row. Wall time stays in memory (it is not reproducible,
/// so it never reaches the CSV output).
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub environment: EnvironmentId,
    pub method: MethodId,
    pub cf_index: usize,
    pub seed: u64,
    pub total_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct Aggregate {
    pub environment: EnvironmentId,
    pub method: MethodId,
    pub mean_cost: f64,
    /// Sample standard deviation over CF rows divided by sqrt(row count).
    pub sem: f64,
}

#[derive(Debug, Clone)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<Aggregate>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("environment,method,cf_index,seed,total_cost,sem,iterations,converged\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},,{},{}",
                r.environment, r.method, r.cf_index, r.seed, r.total_cost, r.iterations,
                r.converged
            );
        }
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{},{},all,,{},{},,",
                a.environment, a.method, a.mean_cost, a.sem
            );
        }
        out
    }

    pub fn aggregate_for(&self, method: MethodId) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }
}

/// Everything produced by one run.
#[derive(Debug)]
pub struct RunOutput {
    pub row: ResultRow,
    pub export: TrajectoryExport,
    pub log: Vec<IterationRecord>,
}

fn solver_config(config: &ExperimentConfig) -> SolverConfig {
    SolverConfig {
        max_iterations: config.max_iterations,
        horizon: config.horizon,
        tol_decrease: config.decrease_threshold(),
        reg_init: config.settings.get("solver.reg_init", 1e-6),
        ..SolverConfig::default()
    }
}

fn schedule_for(config: &ExperimentConfig) -> CstSchedule {
    CstSchedule::new(config.cst_first(), config.cst_max(), config.decrease_threshold())
}

fn one_hot(action: usize, n: usize) -> Vec<f64> {
    (0..n).map(|a| if a == action { 1.0 } else { 0.0 }).collect()
}

const CAR_STATES: [&str; 4] = ["x", "y", "w", "v_car"];
const CAR_CONTROLS: [&str; 2] = ["w_wheel", "acc"];
const CAR_PROBS: [&str; 3] = ["p_brake", "p_g1", "p_g2"];
const BOX_STATES: [&str; 7] = ["x_c", "y_c", "w", "x_cf", "y_cf", "mu_c", "dist_c"];
const BOX_CONTROLS: [&str; 3] = ["u_e", "alpha_p", "v"];
const BOX_PROBS: [&str; 4] = ["p_e0", "p_e1", "p_e2", "p_e3"];

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

struct PlanArtifacts {
    reported_cost: f64,
    iterations: usize,
    converged: bool,
    export: TrajectoryExport,
    log: Vec<IterationRecord>,
}

/// Deterministic, fully observable run (car or box).
fn run_deterministic(config: &ExperimentConfig, method: MethodId, cf_index: usize) -> Result<PlanArtifacts> {
    let sc = solver_config(config);
    let horizon = config.horizon;

    // Environment-specific pieces.
    let is_car = config.environment == EnvironmentId::Car;
    let (state_names, control_names, prob_names) = if is_car {
        (names(&CAR_STATES), names(&CAR_CONTROLS), names(&CAR_PROBS))
    } else {
        (names(&BOX_STATES), names(&BOX_CONTROLS), names(&BOX_PROBS))
    };

    // Build via small monomorphic closures per environment.
    macro_rules! finish {
        ($states:expr, $controls:expr, $probs:expr, $actions:expr, $costs:expr, $final:expr,
         $total:expr, $iters:expr, $conv:expr, $log:expr) => {
            Ok(PlanArtifacts {
                reported_cost: $total,
                iterations: $iters,
                converged: $conv,
                export: TrajectoryExport {
                    state_names,
                    cov_names: vec![],
                    control_names,
                    prob_names,
                    states: $states,
                    cov_diagonals: vec![vec![]; $actions.len() + 1],
                    controls: $controls,
                    probabilities: $probs,
                    actions: $actions,
                    stage_costs: $costs,
                    final_cost: $final,
                },
                log: $log,
            })
        };
    }

    if is_car {
        let params = config.settings.car_params();
        let x0 = params.initial_state_vector();
        match method {
            MethodId::Ilqg => {
                let prob = CarContinuous { params };
                let init = vec![DVector::from_vec(vec![0.0, 0.1, 1.0]); horizon];
                let res = ddp::optimize(&prob, &sc, &x0, &init, None)?;
                let actions: Vec<usize> =
                    res.trajectory.controls.iter().map(|u| prob.gear_of(u[2])).collect();
                let states = res.trajectory.states.iter().map(|s| s.as_slice().to_vec()).collect();
                let controls = res
                    .trajectory
                    .controls
                    .iter()
                    .map(|u| vec![u[0], u[1]])
                    .collect();
                let probs = actions.iter().map(|&a| one_hot(a, 3)).collect();
                finish!(
                    states,
                    controls,
                    probs,
                    actions,
                    res.trajectory.stage_costs.clone(),
                    res.trajectory.final_cost,
                    res.trajectory.total_cost,
                    res.log.len(),
                    res.converged,
                    res.log
                )
            }
            MethodId::Greedy | MethodId::Interpolate => {
                let prob = CarProblem { params };
                let mode = if method == MethodId::Greedy {
                    BaselineMode::Greedy
                } else {
                    BaselineMode::Interpolate
                };
                let init = vec![DVector::from_vec(vec![0.0, 0.1]); horizon];
                let actions0 = vec![ACTION_GEAR1; horizon];
                let res = optimize_switched(&prob, &sc, &x0, &init, &actions0, mode)?;
                let states = res.trajectory.states.iter().map(|s| s.as_slice().to_vec()).collect();
                let controls = res.trajectory.controls.iter().map(|u| u.as_slice().to_vec()).collect();
                let probs = res.actions.iter().map(|&a| one_hot(a, 3)).collect();
                finish!(
                    states,
                    controls,
                    probs,
                    res.actions.clone(),
                    res.trajectory.stage_costs.clone(),
                    res.trajectory.final_cost,
                    res.trajectory.total_cost,
                    res.log.len(),
                    res.converged,
                    res.log
                )
            }
            MethodId::Mixture => {
                let prob = Mixture::new(CarProblem { params });
                let mut schedule = schedule_for(config);
                let p0 = initial_probabilities(ACTION_GEAR1, 3);
                let mut flat0 = DVector::zeros(5);
                flat0[1] = 0.1;
                flat0.rows_mut(2, 3).copy_from(&p0);
                let init = vec![flat0; horizon];
                let res = ddp::optimize(&prob, &sc, &x0, &init, Some(&mut schedule))?;
                let plan = extract_discrete_plan(&res.trajectory.controls, 2);
                let cont: Vec<DVector<f64>> = res
                    .trajectory
                    .controls
                    .iter()
                    .map(|u| DVector::from(u.rows(0, 2)))
                    .collect();
                // Report the cost of the extracted deterministic plan.
                let realized = rollout_switched(&prob.base, &x0, &cont, &plan)?;
                let states = realized.states.iter().map(|s| s.as_slice().to_vec()).collect();
                let controls = cont.iter().map(|u| u.as_slice().to_vec()).collect();
                let probs = res
                    .trajectory
                    .controls
                    .iter()
                    .map(|u| u.rows(2, 3).iter().copied().collect())
                    .collect();
                finish!(
                    states,
                    controls,
                    probs,
                    plan,
                    realized.stage_costs.clone(),
                    realized.final_cost,
                    realized.total_cost,
                    res.log.len(),
                    res.converged,
                    res.log
                )
            }
        }
    } else {
        let params = config.settings.box_params();
        let cfs = sample_cf_grid(
            config.cf_count,
            derive_seed(config.master_seed, &["box", "cf"], &[]),
        );
        let cf = cfs[cf_index];
        let mean_friction = config.settings.friction_mean();
        let x0 = params.make_state(cf, mean_friction, mean_friction);
        match method {
            MethodId::Ilqg => {
                let prob = BoxContinuous { params };
                let init = vec![DVector::from_vec(vec![0.5, 0.0, 1.0]); horizon];
                let res = ddp::optimize(&prob, &sc, &x0, &init, None)?;
                let actions: Vec<usize> = res
                    .trajectory
                    .controls
                    .iter()
                    .map(|u| perimeter_split(u[0]).0)
                    .collect();
                let states = res.trajectory.states.iter().map(|s| s.as_slice().to_vec()).collect();
                let controls = res
                    .trajectory
                    .controls
                    .iter()
                    .map(|u| {
                        let (_, ue) = perimeter_split(u[0]);
                        vec![ue, u[1], u[2]]
                    })
                    .collect();
                let probs = actions.iter().map(|&a| one_hot(a, 4)).collect();
                finish!(
                    states,
                    controls,
                    probs,
                    actions,
                    res.trajectory.stage_costs.clone(),
                    res.trajectory.final_cost,
                    res.trajectory.total_cost,
                    res.log.len(),
                    res.converged,
                    res.log
                )
            }
            MethodId::Greedy | MethodId::Interpolate => {
                let prob = BoxProblem { params };
                let mode = if method == MethodId::Greedy {
                    BaselineMode::Greedy
                } else {
                    BaselineMode::Interpolate
                };
                let init = vec![DVector::from_vec(vec![0.5, 0.0, 1.0]); horizon];
                let actions0 = vec![0usize; horizon];
                let res = optimize_switched(&prob, &sc, &x0, &init, &actions0, mode)?;
                let states = res.trajectory.states.iter().map(|s| s.as_slice().to_vec()).collect();
                let controls = res.trajectory.controls.iter().map(|u| u.as_slice().to_vec()).collect();
                let probs = res.actions.iter().map(|&a| one_hot(a, 4)).collect();
                finish!(
                    states,
                    controls,
                    probs,
                    res.actions.clone(),
                    res.trajectory.stage_costs.clone(),
                    res.trajectory.final_cost,
                    res.trajectory.total_cost,
                    res.log.len(),
                    res.converged,
                    res.log
                )
            }
            MethodId::Mixture => {
                let prob = Mixture::new(BoxProblem { params });
                let mut schedule = schedule_for(config);
                let p0 = initial_probabilities(0, 4);
                let mut flat0 = DVector::zeros(7);
                flat0[0] = 0.5;
                flat0[2] = 1.0;
                flat0.rows_mut(3, 4).copy_from(&p0);
                let init = vec![flat0; horizon];
                let res = ddp::optimize(&prob, &sc, &x0, &init, Some(&mut schedule))?;
                let plan = extract_discrete_plan(&res.trajectory.controls, 3);
                let cont: Vec<DVector<f64>> = res
                    .trajectory
                    .controls
                    .iter()
                    .map(|u| DVector::from(u.rows(0, 3)))
                    .collect();
                let realized = rollout_switched(&prob.base, &x0, &cont, &plan)?;
                let states = realized.states.iter().map(|s| s.as_slice().to_vec()).collect();
                let controls = cont.iter().map(|u| u.as_slice().to_vec()).collect();
                let probs = res
                    .trajectory
                    .controls
                    .iter()
                    .map(|u| u.rows(3, 4).iter().copied().collect())
                    .collect();
                finish!(
                    states,
                    controls,
                    probs,
                    plan,
                    realized.stage_costs.clone(),
                    realized.final_cost,
                    realized.total_cost,
                    res.log.len(),
                    res.converged,
                    res.log
                )
            }
        }
    }
}

/// How the executed control maps to a concrete push at execution time.
enum ExecutionPlan {
    /// Probability block after the first `n` entries; argmax per step.
    MixtureArgmax(usize),
    /// Fixed action sequence from the baseline optimizer.
    Fixed(Vec<usize>),
    /// Perimeter coordinate in the first control entry.
    Perimeter,
}

struct BeliefPlan {
    nominal: BeliefTrajectory,
    policy: crate::ddp::FeedbackPolicy,
    execution: ExecutionPlan,
    iterations: usize,
    converged: bool,
    log: Vec<IterationRecord>,
}

fn belief_initial(
    config: &ExperimentConfig,
    params: &BoxParams,
    cf_rel: (f64, f64),
    true_friction: (f64, f64),
) -> GaussianBelief {
    let s = &config.settings;
    let (mean_cf, sd_cf) = match config.environment {
        EnvironmentId::BoxPomdp => (cf_rel, 0.0),
        _ => ((0.0, 0.0), s.init_sd_cf()),
    };
    let (mean_fric, sd_fric) = match config.environment {
        EnvironmentId::BoxAllUnknown => ((s.friction_mean(), s.friction_mean()), s.init_sd_friction()),
        // Known friction: the belief carries the true values exactly.
        _ => (true_friction, 0.0),
    };
    let mean = DVector::from_vec(vec![
        params.initial_center.0,
        params.initial_center.1,
        params.initial_rotation,
        mean_cf.0,
        mean_cf.1,
        mean_fric.0,
        mean_fric.1,
    ]);
    let sd = [
        s.init_sd_pos(),
        s.init_sd_pos(),
        s.init_sd_rot(),
        sd_cf,
        sd_cf,
        sd_fric,
        sd_fric,
    ];
    let cov = DMatrix::from_diagonal(&DVector::from_iterator(
        BOX_DIM,
        sd.iter().map(|v| v * v),
    ));
    GaussianBelief::new(mean, cov)
}

/// Stochastic box run: plan once under the initial belief, then average the
/// realized cost of seeded closed-loop simulations.
fn run_box_pomdp(config: &ExperimentConfig, method: MethodId, cf_index: usize) -> Result<PlanArtifacts> {
    let sc = solver_config(config);
    let horizon = config.horizon;
    let params = config.settings.box_params();
    let env_tag = config.environment.to_string();
    let cfs = sample_cf_grid(
        config.cf_count,
        derive_seed(config.master_seed, &["box", "cf"], &[]),
    );
    let cf = cfs[cf_index];
    let cf_rel = (
        (cf.0 - 0.5) * 2.0 * params.half_extent,
        (cf.1 - 0.5) * 2.0 * params.half_extent,
    );

    // True friction parameters for this instance.
    let mean_friction = config.settings.friction_mean();
    let true_friction = if config.environment == EnvironmentId::BoxPomdp {
        (mean_friction, mean_friction)
    } else {
        let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.master_seed,
            &[&env_tag, "friction"],
            &[cf_index as u64],
        ));
        let sd = config.settings.init_sd_friction();
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![sd * sd, sd * sd]));
        let draw = sample_gaussian(&cov, &mut frng);
        (
            (mean_friction + draw[0]).max(2.0 * params.friction_floor),
            (mean_friction + draw[1]).max(2.0 * params.friction_floor),
        )
    };

    let b0 = belief_initial(config, &params, cf_rel, true_friction);
    let box_problem = BoxProblem { params: params.clone() };

    // Plan.
    let plan = match method {
        MethodId::Ilqg => {
            let prob = BoxContinuous { params: params.clone() };
            let init = vec![DVector::from_vec(vec![0.5, 0.0, 1.0]); horizon];
            let res = belief_optimize(&prob, &sc, &b0, &init, None)?;
            BeliefPlan {
                nominal: res.trajectory,
                policy: res.policy,
                execution: ExecutionPlan::Perimeter,
                iterations: res.log.len(),
                converged: res.converged,
                log: res.log,
            }
        }
        MethodId::Greedy | MethodId::Interpolate => {
            let mode = if method == MethodId::Greedy {
                BaselineMode::Greedy
            } else {
                BaselineMode::Interpolate
            };
            let init = vec![DVector::from_vec(vec![0.5, 0.0, 1.0]); horizon];
            let actions0 = vec![0usize; horizon];
            let res = optimize_switched_belief(&box_problem, &sc, &b0, &init, &actions0, mode)?;
            BeliefPlan {
                nominal: res.trajectory,
                policy: res.policy,
                execution: ExecutionPlan::Fixed(res.actions),
                iterations: res.log.len(),
                converged: res.converged,
                log: res.log,
            }
        }
        MethodId::Mixture => {
            let prob = Mixture::new(BoxProblem { params: params.clone() });
            let mut schedule = schedule_for(config);
            let p0 = initial_probabilities(0, 4);
            let mut flat0 = DVector::zeros(7);
            flat0[0] = 0.5;
            flat0[2] = 1.0;
            flat0.rows_mut(3, 4).copy_from(&p0);
            let init = vec![flat0; horizon];
            let res = belief_optimize(&prob, &sc, &b0, &init, Some(&mut schedule))?;
            BeliefPlan {
                nominal: res.trajectory,
                policy: res.policy,
                execution: ExecutionPlan::MixtureArgmax(3),
                iterations: res.log.len(),
                converged: res.converged,
                log: res.log,
            }
        }
    };

    // Closed-loop evaluation.
    let pose_cov = {
        let s = &config.settings;
        let sd = [s.init_sd_pos(), s.init_sd_pos(), s.init_sd_rot()];
        DMatrix::from_diagonal(&DVector::from_iterator(3, sd.iter().map(|v| v * v)))
    };
    let mut costs = Vec::with_capacity(config.samples_per_cf);
    for sample in 0..config.samples_per_cf {
        let seed = derive_seed(
            config.master_seed,
            &[&env_tag, &method.to_string(), "sample"],
            &[cf_index as u64, sample as u64],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose_noise = sample_gaussian(&pose_cov, &mut rng);
        let x_true = DVector::from_vec(vec![
            params.initial_center.0 + pose_noise[0],
            params.initial_center.1 + pose_noise[1],
            params.initial_rotation + pose_noise[2],
            cf_rel.0,
            cf_rel.1,
            true_friction.0,
            true_friction.1,
        ]);

        let record = match &plan.execution {
            ExecutionPlan::MixtureArgmax(n_cont) => {
                let n_cont = *n_cont;
                let mix = Mixture::new(BoxProblem { params: params.clone() });
                let mut model = closed_loop_model(&mix, sc.jacobian_step);
                let p = params.clone();
                model.execute = Box::new(move |x, bm, u, rng| {
                    let probs = DVector::from(u.rows(n_cont, u.len() - n_cont));
                    let action = probs.iter().enumerate().fold(0usize, |best, (i, &v)| {
                        if v > probs[best] {
                            i
                        } else {
                            best
                        }
                    });
                    p.execute(x, bm, action, u[0], u[1], u[2])
                        + sample_gaussian(&p.process_noise(), rng)
                });
                let p2 = params.clone();
                model.stage_cost =
                    Box::new(move |x, u, cov| p2.running_cost(x, u[0], u[1], u[2], cov));
                let p3 = params.clone();
                model.final_cost = Box::new(move |x, cov| p3.final_cost(x, cov));
                simulate_closed_loop(&plan.nominal, &plan.policy, x_true, &mut model, &mut rng)
            }
            ExecutionPlan::Fixed(actions) => {
                let acts = actions.clone();
                let step_counter = std::cell::Cell::new(0usize);
                let p = params.clone();
                let acts2 = actions.clone();
                let bp = box_problem.clone();
                let p_obs = params.clone();
                let p2 = params.clone();
                let p3 = params.clone();
                let mut model = ClosedLoopModel {
                    bounds: box_problem.continuous_bounds(),
                    simplex_groups: vec![],
                    execute: Box::new(move |x, bm, u, rng| {
                        let t = step_counter.get();
                        step_counter.set(t + 1);
                        let a = acts[t.min(acts.len() - 1)];
                        p.execute(x, bm, a, u[0], u[1], u[2])
                            + sample_gaussian(&p.process_noise(), rng)
                    }),
                    observe: Box::new(move |x, rng| {
                        p_obs.observe(x) + sample_gaussian(&p_obs.obs_noise(), rng)
                    }),
                    filter: Box::new(move |t, b, u, z| {
                        let view = FixedActionBelief {
                            base: &bp,
                            action: acts2[t.min(acts2.len() - 1)],
                        };
                        ekf_step(&view, b, u, Some(z), sc.jacobian_step)
                    }),
                    stage_cost: Box::new(move |x, u, cov| {
                        p2.running_cost(x, u[0], u[1], u[2], cov)
                    }),
                    final_cost: Box::new(move |x, cov| p3.final_cost(x, cov)),
                };
                simulate_closed_loop(&plan.nominal, &plan.policy, x_true, &mut model, &mut rng)
            }
            ExecutionPlan::Perimeter => {
                let prob = BoxContinuous { params: params.clone() };
                let mut model = closed_loop_model(&prob, sc.jacobian_step);
                let p = params.clone();
                model.execute = Box::new(move |x, bm, u, rng| {
                    let (e, ue) = perimeter_split(u[0]);
                    p.execute(x, bm, e, ue, u[1], u[2])
                        + sample_gaussian(&p.process_noise(), rng)
                });
                let p2 = params.clone();
                model.stage_cost = Box::new(move |x, u, cov| {
                    let (_, ue) = perimeter_split(u[0]);
                    p2.running_cost(x, ue, u[1], u[2], cov)
                });
                let p3 = params.clone();
                model.final_cost = Box::new(move |x, cov| p3.final_cost(x, cov));
                simulate_closed_loop(&plan.nominal, &plan.policy, x_true, &mut model, &mut rng)
            }
        };
        match record {
            Ok(r) => costs.push(r.total_cost),
            // A diverged simulation is recorded as non-finite, not dropped.
            Err(_) => costs.push(f64::INFINITY),
        }
    }
    let mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;

    // Export the planned belief trajectory with covariance diagonals.
    let actions: Vec<usize> = match &plan.execution {
        ExecutionPlan::MixtureArgmax(n) => extract_discrete_plan(&plan.nominal.controls, *n),
        ExecutionPlan::Fixed(actions) => actions.clone(),
        ExecutionPlan::Perimeter => plan
            .nominal
            .controls
            .iter()
            .map(|u| perimeter_split(u[0]).0)
            .collect(),
    };
    let probabilities: Vec<Vec<f64>> = match &plan.execution {
        ExecutionPlan::MixtureArgmax(n) => plan
            .nominal
            .controls
            .iter()
            .map(|u| u.rows(*n, 4).iter().copied().collect())
            .collect(),
        _ => actions.iter().map(|&a| one_hot(a, 4)).collect(),
    };
    let controls: Vec<Vec<f64>> = plan
        .nominal
        .controls
        .iter()
        .map(|u| match &plan.execution {
            ExecutionPlan::Perimeter => {
                let (_, ue) = perimeter_split(u[0]);
                vec![ue, u[1], u[2]]
            }
            _ => vec![u[0], u[1], u[2]],
        })
        .collect();
    let export = TrajectoryExport {
        state_names: names(&BOX_STATES),
        cov_names: BOX_STATES.iter().map(|s| format!("var_{s}")).collect(),
        control_names: names(&BOX_CONTROLS),
        prob_names: names(&BOX_PROBS),
        states: plan.nominal.beliefs.iter().map(|b| b.mean.as_slice().to_vec()).collect(),
        cov_diagonals: plan
            .nominal
            .beliefs
            .iter()
            .map(|b| b.cov.diagonal().as_slice().to_vec())
            .collect(),
        controls,
        probabilities,
        actions,
        stage_costs: plan.nominal.stage_costs.clone(),
        final_cost: plan.nominal.final_cost,
    };

    Ok(PlanArtifacts {
        reported_cost: mean_cost,
        iterations: plan.iterations,
        converged: plan.converged,
        export,
        log: plan.log,
    })
}

/// Run one `(method, cf)` cell of an experiment.
pub fn run_single(config: &ExperimentConfig, method: MethodId, cf_index: usize) -> Result<RunOutput> {
    config.validate()?;
    if cf_index >= config.cf_count {
        return Err(Error::InvalidArgument(format!(
            "cf index {cf_index} out of range (cf count {})",
            config.cf_count
        )));
    }
    let start = Instant::now();
    let artifacts = if config.environment.is_stochastic() {
        run_box_pomdp(config, method, cf_index)?
    } else {
        run_deterministic(config, method, cf_index)?
    };
    let seed = derive_seed(
        config.master_seed,
        &[&config.environment.to_string(), &method.to_string()],
        &[cf_index as u64],
    );
    Ok(RunOutput {
        row: ResultRow {
            environment: config.environment,
            method,
            cf_index,
            seed,
            total_cost: artifacts.reported_cost,
            iterations: artifacts.iterations,
            converged: artifacts.converged,
            wall_time: start.elapsed(),
        },
        export: artifacts.export,
        log: artifacts.log,
    })
}

/// Fan out `methods x CFs`, aggregate per method, keep row order fixed.
pub fn run_batch(config: &ExperimentConfig) -> Result<ResultTable> {
    config.validate()?;
    let jobs: Vec<(MethodId, usize)> = config
        .methods
        .iter()
        .flat_map(|&m| (0..config.cf_count).map(move |cf| (m, cf)))
        .collect();
    let rows: Vec<ResultRow> = jobs
        .par_iter()
        .map(|&(method, cf)| run_single(config, method, cf).map(|out| out.row))
        .collect::<Result<Vec<_>>>()?;

    let mut aggregates = Vec::new();
    for &method in &config.methods {
        let costs: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.total_cost)
            .collect();
        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        let sem = if costs.len() > 1 {
            let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        aggregates.push(Aggregate {
            environment: config.environment,
            method,
            mean_cost: mean,
            sem,
        });
    }
    Ok(ResultTable { rows, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Settings;

    fn tiny_car_config(methods: Vec<MethodId>) -> ExperimentConfig {
        let mut settings = Settings::default();
        settings.set_line("car.dt = 0.15").unwrap();
        ExperimentConfig {
            environment: EnvironmentId::Car,
            methods,
            horizon: 40,
            max_iterations: 12,
            cf_count: 1,
            samples_per_cf: 1,
            master_seed: 0,
            settings,
        }
    }

    #[test]
    fn car_single_run_is_bit_identical_on_rerun() {
        let config = tiny_car_config(vec![MethodId::Mixture]);
        let a = run_single(&config, MethodId::Mixture, 0).unwrap();
        let b = run_single(&config, MethodId::Mixture, 0).unwrap();
        assert_eq!(a.row.total_cost.to_bits(), b.row.total_cost.to_bits());
        assert_eq!(a.export.to_csv(), b.export.to_csv());
    }

    #[test]
    fn batch_shape_and_aggregates() {
        let config = tiny_car_config(vec![MethodId::Greedy, MethodId::Ilqg]);
        let table = run_batch(&config).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.aggregates.len(), 2);
        // Aggregate mean equals the mean of row costs.
        for a in &table.aggregates {
            let costs: Vec<f64> = table
                .rows
                .iter()
                .filter(|r| r.method == a.method)
                .map(|r| r.total_cost)
                .collect();
            let mean = costs.iter().sum::<f64>() / costs.len() as f64;
            assert!((a.mean_cost - mean).abs() < 1e-12);
        }
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 + 2);
        assert!(!csv.contains("wall"));
    }

    #[test]
    fn out_of_range_cf_is_rejected() {
        let config = tiny_car_config(vec![MethodId::Ilqg]);
        assert!(run_single(&config, MethodId::Ilqg, 3).is_err());
    }
}
