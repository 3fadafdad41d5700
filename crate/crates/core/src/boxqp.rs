//! Projected-Newton QP solver for the per-timestep forward gains.
//!
//! Minimizes `0.5 d' H d + d' g` over a box, optionally with per-group
//! equality constraints that keep action-probability blocks on the simplex.
//! The equality constraint is handled in two steps: the Newton search
//! direction is mean-centered inside each group (so a feasible iterate stays
//! feasible), and the line search step is capped so no probability bound is
//! overstepped. Box-only coordinates are clamped instead of capped.
//!
//! Warm starting with a previous gain is supported and cheap: starting at
//! the optimum converges in one or two iterations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

/// Convergence tolerance on the reduced-gradient norm of the free subspace.
pub const GRAD_TOL: f64 = 1e-8;
/// Iteration cap for the projected-Newton loop.
pub const MAX_ITERATIONS: usize = 100;
/// Armijo sufficient-decrease fraction.
const ARMIJO_C: f64 = 0.1;
/// Line-search backtracking factor.
const BACKTRACK: f64 = 0.5;
/// Smallest line-search step before giving up on the direction.
const MIN_STEP: f64 = 1e-16;

/// One equality-constrained index group: the entries of `delta` at
/// `indices` must sum to `sum_target` (zero when the nominal control
/// already satisfies the constraint).
#[derive(Debug, Clone)]
pub struct SimplexGroup {
    pub indices: Vec<usize>,
    pub sum_target: f64,
}

/// Quadratic program in the control change `delta`.
///
/// Bounds are already expressed relative to the nominal control, i.e. the
/// feasible set is `lower <= delta <= upper`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub simplex_groups: Vec<SimplexGroup>,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, d: &DVector<f64>) -> f64 {
        0.5 * (&self.h * d).dot(d) + self.g.dot(d)
    }
}

/// Solution of a box (and optionally simplex) constrained QP.
#[derive(Debug)]
pub struct QpSolution {
    pub delta: DVector<f64>,
    /// Entries sitting on an active box bound (or fixed by a degenerate
    /// group); the corresponding feedback rows are zeroed by the caller.
    pub clamped: Vec<bool>,
    pub free_indices: Vec<usize>,
    /// Cholesky factorization of the free-subspace Hessian, for computing
    /// feedback gains without a second factorization.
    pub free_factorization: Option<Cholesky<f64, Dyn>>,
    pub iterations: usize,
    /// Objective value after each accepted step (non-increasing).
    pub objective_trace: Vec<f64>,
}

impl QpSolution {
    /// Solve `H_ff X = rhs[free, :]` and scatter into a full-size matrix
    /// with zero rows at clamped indices. This is `-(Q_uu^f)^{-1} Q_ux`
    /// when called with `-Q_ux`.
    pub fn solve_free_rows(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.clamped.len(), rhs.ncols());
        let (Some(chol), false) = (&self.free_factorization, self.free_indices.is_empty()) else {
            return out;
        };
        let nf = self.free_indices.len();
        let mut sub = DMatrix::zeros(nf, rhs.ncols());
        for (row, &i) in self.free_indices.iter().enumerate() {
            sub.set_row(row, &rhs.row(i));
        }
        let solved = chol.solve(&sub);
        for (row, &i) in self.free_indices.iter().enumerate() {
            out.set_row(i, &solved.row(row));
        }
        out
    }
}

/// Solve a box-constrained QP (no simplex groups allowed).
pub fn solve_box(problem: &QpProblem, warm_start: &DVector<f64>) -> Result<QpSolution> {
    if !problem.simplex_groups.is_empty() {
        return Err(Error::InvalidArgument(
            "solve_box does not accept simplex groups".into(),
        ));
    }
    solve(problem, warm_start)
}

/// Solve a QP with box bounds and per-group sum constraints.
pub fn solve_box_simplex(problem: &QpProblem, warm_start: &DVector<f64>) -> Result<QpSolution> {
    solve(problem, warm_start)
}

fn group_of(problem: &QpProblem, idx: usize) -> Option<usize> {
    problem
        .simplex_groups
        .iter()
        .position(|grp| grp.indices.contains(&idx))
}

/// Project group coordinates onto `{lo <= x <= hi, sum = target}` by
/// bisection on a shift multiplier.
fn project_group(
    x: &mut DVector<f64>,
    grp: &SimplexGroup,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<()> {
    let lo_sum: f64 = grp.indices.iter().map(|&i| lower[i]).sum();
    let hi_sum: f64 = grp.indices.iter().map(|&i| upper[i]).sum();
    if grp.sum_target < lo_sum - 1e-12 || grp.sum_target > hi_sum + 1e-12 {
        return Err(Error::QpInfeasible {
            reason: format!(
                "group sum target {} outside achievable range [{lo_sum}, {hi_sum}]",
                grp.sum_target
            ),
        });
    }
    let shifted_sum = |lambda: f64| -> f64 {
        grp.indices
            .iter()
            .map(|&i| (x[i] - lambda).clamp(lower[i], upper[i]))
            .sum()
    };
    let mut lo = grp
        .indices
        .iter()
        .map(|&i| x[i] - upper[i])
        .fold(f64::INFINITY, f64::min)
        - 1.0;
    let mut hi = grp
        .indices
        .iter()
        .map(|&i| x[i] - lower[i])
        .fold(f64::NEG_INFINITY, f64::max)
        + 1.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if shifted_sum(mid) > grp.sum_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    for &i in &grp.indices {
        x[i] = (x[i] - lambda).clamp(lower[i], upper[i]);
    }
    Ok(())
}

fn solve(problem: &QpProblem, warm_start: &DVector<f64>) -> Result<QpSolution> {
    let n = problem.dim();
    if warm_start.len() != n {
        return Err(Error::InvalidArgument("warm start dimension mismatch".into()));
    }

    // Degenerate groups of size one are fixed by the sum constraint and
    // excluded from the optimization.
    let mut fixed = vec![false; n];
    for grp in &problem.simplex_groups {
        if grp.indices.len() == 1 {
            fixed[grp.indices[0]] = true;
        }
    }

    // Feasible starting point.
    let mut x = warm_start.clone();
    for i in 0..n {
        x[i] = x[i].clamp(problem.lower[i], problem.upper[i]);
    }
    for grp in &problem.simplex_groups {
        if grp.indices.len() == 1 {
            let i = grp.indices[0];
            if grp.sum_target < problem.lower[i] - 1e-12
                || grp.sum_target > problem.upper[i] + 1e-12
            {
                return Err(Error::QpInfeasible {
                    reason: "degenerate group target outside bounds".into(),
                });
            }
            x[i] = grp.sum_target;
        } else {
            project_group(&mut x, grp, &problem.lower, &problem.upper)?;
        }
    }

    let group_index: Vec<Option<usize>> = (0..n).map(|i| group_of(problem, i)).collect();
    let mut objective_trace = vec![problem.objective(&x)];
    let mut iterations = 0;
    let mut clamped = vec![false; n];

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let grad = &problem.h * &x + &problem.g;

        // Group multipliers: the mean gradient over non-bound members, or
        // over all members when every entry sits on a bound.
        let mut lambdas = vec![0.0; problem.simplex_groups.len()];
        for (gi, grp) in problem.simplex_groups.iter().enumerate() {
            let interior: Vec<usize> = grp
                .indices
                .iter()
                .copied()
                .filter(|&i| {
                    !fixed[i] && x[i] > problem.lower[i] + 1e-14 && x[i] < problem.upper[i] - 1e-14
                })
                .collect();
            let members = if interior.is_empty() {
                &grp.indices
            } else {
                &interior
            };
            lambdas[gi] = members.iter().map(|&i| grad[i]).sum::<f64>() / members.len() as f64;
        }

        let reduced = |i: usize| -> f64 {
            match group_index[i] {
                Some(gi) => grad[i] - lambdas[gi],
                None => grad[i],
            }
        };

        for i in 0..n {
            let at_lower = x[i] <= problem.lower[i] + 1e-14;
            let at_upper = x[i] >= problem.upper[i] - 1e-14;
            let r = reduced(i);
            clamped[i] = fixed[i] || (at_lower && r > 0.0) || (at_upper && r < 0.0);
        }
        let free: Vec<usize> = (0..n).filter(|&i| !clamped[i]).collect();

        if free.is_empty() {
            break;
        }

        // Reduced gradient on the free set, mean-centered per group so the
        // equality multiplier drops out.
        let mut rg = DVector::zeros(free.len());
        for (gi, grp) in problem.simplex_groups.iter().enumerate() {
            let free_members: Vec<usize> =
                grp.indices.iter().copied().filter(|&i| !clamped[i]).collect();
            if !free_members.is_empty() {
                lambdas[gi] =
                    free_members.iter().map(|&i| grad[i]).sum::<f64>() / free_members.len() as f64;
            }
        }
        for (k, &i) in free.iter().enumerate() {
            rg[k] = match group_index[i] {
                Some(gi) => grad[i] - lambdas[gi],
                None => grad[i],
            };
        }
        if rg.norm() <= GRAD_TOL {
            break;
        }

        // Newton direction on the free subspace.
        let nf = free.len();
        let mut hff = DMatrix::zeros(nf, nf);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                hff[(a, b)] = problem.h[(i, j)];
            }
        }
        let chol = Cholesky::new(hff).ok_or_else(|| Error::QpFailure {
            reason: "free-subspace Hessian not positive definite".into(),
        })?;
        let mut grad_f = DVector::zeros(nf);
        for (k, &i) in free.iter().enumerate() {
            grad_f[k] = grad[i];
        }
        let mut dir = -chol.solve(&grad_f);

        // Mean-center the direction inside each group over its free members.
        for grp in &problem.simplex_groups {
            let positions: Vec<usize> = free
                .iter()
                .enumerate()
                .filter(|(_, &i)| grp.indices.contains(&i))
                .map(|(k, _)| k)
                .collect();
            if positions.is_empty() {
                continue;
            }
            let mean = positions.iter().map(|&k| dir[k]).sum::<f64>() / positions.len() as f64;
            for &k in &positions {
                dir[k] -= mean;
            }
        }

        let mut slope = rg.dot(&dir);
        if slope >= 0.0 {
            // Centered Newton step failed to descend; fall back to the
            // projected steepest descent direction.
            dir = -rg.clone();
            slope = rg.dot(&dir);
            if slope >= -1e-18 {
                break;
            }
        }

        // Cap the step so no group coordinate oversteps a bound.
        let mut alpha_max = 1.0f64;
        for (k, &i) in free.iter().enumerate() {
            if group_index[i].is_none() || dir[k].abs() < 1e-18 {
                continue;
            }
            let room = if dir[k] > 0.0 {
                problem.upper[i] - x[i]
            } else {
                problem.lower[i] - x[i]
            };
            alpha_max = alpha_max.min((room / dir[k]).max(0.0));
        }

        let candidate = |alpha: f64, x: &DVector<f64>| -> DVector<f64> {
            let mut c = x.clone();
            for (k, &i) in free.iter().enumerate() {
                let v = x[i] + alpha * dir[k];
                c[i] = v.clamp(problem.lower[i], problem.upper[i]);
            }
            c
        };

        let obj0 = *objective_trace.last().unwrap();
        let mut alpha = alpha_max;
        let mut advanced = false;
        while alpha >= MIN_STEP {
            let cand = candidate(alpha, &x);
            let obj = problem.objective(&cand);
            let predicted: f64 = (0..n).map(|i| grad[i] * (cand[i] - x[i])).sum();
            if obj <= obj0 + ARMIJO_C * predicted && predicted < 0.0 {
                x = cand;
                objective_trace.push(obj);
                advanced = true;
                break;
            }
            alpha *= BACKTRACK;
        }
        if !advanced {
            break;
        }
    }

    // Final active set and factorization for the feedback-gain computation.
    let grad = &problem.h * &x + &problem.g;
    let mut lambdas = vec![0.0; problem.simplex_groups.len()];
    for (gi, grp) in problem.simplex_groups.iter().enumerate() {
        let interior: Vec<usize> = grp
            .indices
            .iter()
            .copied()
            .filter(|&i| {
                !fixed[i] && x[i] > problem.lower[i] + 1e-14 && x[i] < problem.upper[i] - 1e-14
            })
            .collect();
        let members = if interior.is_empty() {
            &grp.indices
        } else {
            &interior
        };
        lambdas[gi] = members.iter().map(|&i| grad[i]).sum::<f64>() / members.len() as f64;
    }
    for i in 0..n {
        let at_lower = x[i] <= problem.lower[i] + 1e-14;
        let at_upper = x[i] >= problem.upper[i] - 1e-14;
        let r = match group_index[i] {
            Some(gi) => grad[i] - lambdas[gi],
            None => grad[i],
        };
        clamped[i] = fixed[i] || (at_lower && r > 0.0) || (at_upper && r < 0.0);
        // Snap active entries exactly onto their bound.
        if at_lower {
            x[i] = problem.lower[i];
        } else if at_upper {
            x[i] = problem.upper[i];
        }
    }
    let free_indices: Vec<usize> = (0..n).filter(|&i| !clamped[i]).collect();
    let free_factorization = if free_indices.is_empty() {
        None
    } else {
        let nf = free_indices.len();
        let mut hff = DMatrix::zeros(nf, nf);
        for (a, &i) in free_indices.iter().enumerate() {
            for (b, &j) in free_indices.iter().enumerate() {
                hff[(a, b)] = problem.h[(i, j)];
            }
        }
        Some(Cholesky::new(hff).ok_or_else(|| Error::QpFailure {
            reason: "free-subspace Hessian not positive definite".into(),
        })?)
    };

    Ok(QpSolution {
        delta: x,
        clamped,
        free_indices,
        free_factorization,
        iterations,
        objective_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn box_problem(h: DMatrix<f64>, g: DVector<f64>, lo: f64, hi: f64) -> QpProblem {
        let n = g.len();
        QpProblem {
            h,
            g,
            lower: DVector::from_element(n, lo),
            upper: DVector::from_element(n, hi),
            simplex_groups: vec![],
        }
    }

    /// Enumerate every {lower, upper, free} assignment and return the best
    /// feasible objective. Exact for convex QPs; used as the test oracle.
    pub(crate) fn enumerate_box_oracle(problem: &QpProblem) -> f64 {
        let n = problem.dim();
        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(n as u32) {
            let mut kind = Vec::with_capacity(n);
            let mut c = code;
            for _ in 0..n {
                kind.push(c % 3);
                c /= 3;
            }
            let free: Vec<usize> = (0..n).filter(|&i| kind[i] == 2).collect();
            let mut x = DVector::zeros(n);
            for i in 0..n {
                x[i] = match kind[i] {
                    0 => problem.lower[i],
                    1 => problem.upper[i],
                    _ => 0.0,
                };
            }
            if !free.is_empty() {
                let nf = free.len();
                let mut hff = DMatrix::zeros(nf, nf);
                let mut rhs = DVector::zeros(nf);
                for (a, &i) in free.iter().enumerate() {
                    rhs[a] = -problem.g[i];
                    for j in 0..n {
                        if let Some(b) = free.iter().position(|&f| f == j) {
                            hff[(a, b)] = problem.h[(i, j)];
                        } else {
                            rhs[a] -= problem.h[(i, j)] * x[j];
                        }
                    }
                }
                let Some(chol) = Cholesky::new(hff) else {
                    continue;
                };
                let xf = chol.solve(&rhs);
                let mut ok = true;
                for (a, &i) in free.iter().enumerate() {
                    if xf[a] < problem.lower[i] - 1e-12 || xf[a] > problem.upper[i] + 1e-12 {
                        ok = false;
                        break;
                    }
                    x[i] = xf[a];
                }
                if !ok {
                    continue;
                }
            }
            best = best.min(problem.objective(&x));
        }
        best
    }

    /// Brute-force grid over the probability simplex (resolution `1/m`),
    /// returning the best objective in delta space.
    pub(crate) fn simplex_grid_oracle(
        problem: &QpProblem,
        nominal: &DVector<f64>,
        m: usize,
    ) -> f64 {
        let n = problem.dim();
        let mut best = f64::INFINITY;
        let mut counts = vec![0usize; n];
        fn recurse(
            problem: &QpProblem,
            nominal: &DVector<f64>,
            m: usize,
            dim: usize,
            remaining: usize,
            counts: &mut Vec<usize>,
            best: &mut f64,
        ) {
            let n = counts.len();
            if dim == n - 1 {
                counts[dim] = remaining;
                let delta = DVector::from_iterator(
                    n,
                    counts
                        .iter()
                        .zip(nominal.iter())
                        .map(|(&k, &p)| k as f64 / m as f64 - p),
                );
                let obj = problem.objective(&delta);
                if obj < *best {
                    *best = obj;
                }
                return;
            }
            for k in 0..=remaining {
                counts[dim] = k;
                recurse(problem, nominal, m, dim + 1, remaining - k, counts, best);
            }
        }
        recurse(problem, nominal, m, 0, m, &mut counts, &mut best);
        best
    }

    #[test]
    fn interior_solution_is_unconstrained_minimum() {
        let p = box_problem(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![0.2, -0.3]),
            -1.0,
            1.0,
        );
        let sol = solve_box(&p, &DVector::zeros(2)).unwrap();
        assert_abs_diff_eq!(sol.delta[0], -0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.delta[1], 0.3, epsilon = 1e-9);
        assert!(sol.clamped.iter().all(|&c| !c));
    }

    #[test]
    fn active_bound_is_clamped() {
        let p = box_problem(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![2.0, 0.0]),
            -1.0,
            1.0,
        );
        let sol = solve_box(&p, &DVector::zeros(2)).unwrap();
        assert_abs_diff_eq!(sol.delta[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.delta[1], 0.0, epsilon = 1e-12);
        assert!(sol.clamped[0]);
        assert!(!sol.clamped[1]);
    }

    #[test]
    fn zero_gradient_stays_at_zero() {
        let p = box_problem(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2), -1.0, 1.0);
        let sol = solve_box(&p, &DVector::zeros(2)).unwrap();
        assert_abs_diff_eq!(sol.delta.norm(), 0.0, epsilon = 1e-12);
        assert!(sol.iterations <= 2);
    }

    #[test]
    fn simplex_two_probabilities() {
        // Nominal p = (0.5, 0.5); optimum pushes all mass to the second.
        let p = QpProblem {
            h: DMatrix::identity(2, 2),
            g: DVector::from_vec(vec![1.0, -1.0]),
            lower: DVector::from_vec(vec![-0.5, -0.5]),
            upper: DVector::from_vec(vec![0.5, 0.5]),
            simplex_groups: vec![SimplexGroup {
                indices: vec![0, 1],
                sum_target: 0.0,
            }],
        };
        let sol = solve_box_simplex(&p, &DVector::zeros(2)).unwrap();
        assert_abs_diff_eq!(sol.delta[0], -0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.delta[1], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.delta.sum(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn simplex_zero_gradient_keeps_nominal() {
        let p = QpProblem {
            h: DMatrix::identity(3, 3),
            g: DVector::zeros(3),
            lower: DVector::from_vec(vec![-0.2, -0.3, -0.5]),
            upper: DVector::from_vec(vec![0.8, 0.7, 0.5]),
            simplex_groups: vec![SimplexGroup {
                indices: vec![0, 1, 2],
                sum_target: 0.0,
            }],
        };
        let sol = solve_box_simplex(&p, &DVector::zeros(3)).unwrap();
        assert_abs_diff_eq!(sol.delta.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn simplex_three_probabilities_drives_one_to_zero() {
        // Nominal uniform; penalizing the third entry splits its mass
        // between the other two: final p = (0.5, 0.5, 0).
        let third = 1.0 / 3.0;
        let p = QpProblem {
            h: DMatrix::identity(3, 3),
            g: DVector::from_vec(vec![0.0, 0.0, 3.0]),
            lower: DVector::from_element(3, -third),
            upper: DVector::from_element(3, 1.0 - third),
            simplex_groups: vec![SimplexGroup {
                indices: vec![0, 1, 2],
                sum_target: 0.0,
            }],
        };
        let sol = solve_box_simplex(&p, &DVector::zeros(3)).unwrap();
        let final_p: Vec<f64> = sol.delta.iter().map(|d| d + third).collect();
        assert_abs_diff_eq!(final_p[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(final_p[1], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(final_p[2], 0.0, epsilon = 1e-9);
        // Matches the grid oracle.
        let oracle = simplex_grid_oracle(&p, &DVector::from_element(3, third), 1000);
        assert!((problem_obj(&p, &sol.delta) - oracle).abs() <= 2e-3);
    }

    fn problem_obj(p: &QpProblem, d: &DVector<f64>) -> f64 {
        p.objective(d)
    }

    #[test]
    fn random_box_qps_match_enumeration() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..60 {
            let n = rng.random_range(2..=4);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
            let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let p = box_problem(h, g, -1.0, 1.0);
            let sol = solve_box(&p, &DVector::zeros(n)).unwrap();
            let oracle = enumerate_box_oracle(&p);
            assert!(
                (p.objective(&sol.delta) - oracle).abs() <= 1e-6,
                "solver {} vs oracle {}",
                p.objective(&sol.delta),
                oracle
            );
            // Clamped entries sit exactly on their bound.
            for i in 0..n {
                if sol.clamped[i] {
                    assert!(sol.delta[i] == p.lower[i] || sol.delta[i] == p.upper[i]);
                }
            }
        }
    }

    #[test]
    fn warm_start_at_optimum_converges_immediately() {
        let p = box_problem(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DVector::from_vec(vec![0.4, -0.2]),
            -1.0,
            1.0,
        );
        let first = solve_box(&p, &DVector::zeros(2)).unwrap();
        let second = solve_box(&p, &first.delta).unwrap();
        assert!(second.iterations <= 2, "iterations {}", second.iterations);
        assert_abs_diff_eq!(second.delta, first.delta, epsilon = 1e-9);
    }

    #[test]
    fn objective_is_non_increasing() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..20 {
            let n = rng.random_range(2..=4);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
            let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let nominal = {
                let raw = DVector::from_fn(n, |_, _| rng.random_range(0.05..1.0));
                let s = raw.sum();
                raw / s
            };
            let p = QpProblem {
                h,
                g,
                lower: -nominal.clone(),
                upper: nominal.map(|v| 1.0 - v),
                simplex_groups: vec![SimplexGroup {
                    indices: (0..n).collect(),
                    sum_target: 0.0,
                }],
            };
            let sol = solve_box_simplex(&p, &DVector::zeros(n)).unwrap();
            for w in sol.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            assert_abs_diff_eq!(sol.delta.sum(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn degenerate_group_of_size_one_is_fixed() {
        let p = QpProblem {
            h: DMatrix::identity(2, 2),
            g: DVector::from_vec(vec![5.0, 0.1]),
            lower: DVector::from_vec(vec![-1.0, -1.0]),
            upper: DVector::from_vec(vec![1.0, 1.0]),
            simplex_groups: vec![SimplexGroup {
                indices: vec![0],
                sum_target: 0.0,
            }],
        };
        let sol = solve_box_simplex(&p, &DVector::zeros(2)).unwrap();
        assert_eq!(sol.delta[0], 0.0);
        assert!(sol.clamped[0]);
        assert_abs_diff_eq!(sol.delta[1], -0.1, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_group_target_is_reported() {
        let p = QpProblem {
            h: DMatrix::identity(2, 2),
            g: DVector::zeros(2),
            lower: DVector::from_vec(vec![0.0, 0.0]),
            upper: DVector::from_vec(vec![0.2, 0.2]),
            simplex_groups: vec![SimplexGroup {
                indices: vec![0, 1],
                sum_target: 1.0,
            }],
        };
        assert!(matches!(
            solve_box_simplex(&p, &DVector::zeros(2)),
            Err(Error::QpInfeasible { .. })
        ));
    }
}
