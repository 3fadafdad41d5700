//! Central finite differences for black-box dynamics and costs.
//!
//! Every derivative the solvers consume is available through this module so
//! that environments only need to provide plain evaluation functions.
//! Problems may still override with analytic derivatives through the
//! problem traits; the finite-difference path is the default.
//!
//! Steps are scaled per coordinate as `step * max(1, |z_i|)`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Default step for Jacobians and gradients.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Default step for cost Hessians. Second differences lose roughly half the
/// mantissa to cancellation, so a larger probe is used than for gradients.
pub const DEFAULT_HESSIAN_STEP: f64 = 1e-4;

fn probe_step(step: f64, coord: f64) -> f64 {
    step * coord.abs().max(1.0)
}

fn check_finite(v: &DVector<f64>, coordinate: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::DifferentiationFailure { coordinate })
    }
}

/// Central-difference Jacobian of `f` at `x`.
///
/// Entry `(i, j)` is `(f_i(x + h_j e_j) - f_i(x - h_j e_j)) / (2 h_j)`.
pub fn finite_diff_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut probe = x.clone();
    let mut jac: Option<DMatrix<f64>> = None;
    for j in 0..n {
        let h = probe_step(step, x[j]);
        probe[j] = x[j] + h;
        let fp = f(&probe);
        check_finite(&fp, j)?;
        probe[j] = x[j] - h;
        let fm = f(&probe);
        check_finite(&fm, j)?;
        probe[j] = x[j];

        let col = (fp - fm) / (2.0 * h);
        let jac = jac.get_or_insert_with(|| DMatrix::zeros(col.len(), n));
        jac.set_column(j, &col);
    }
    Ok(jac.unwrap_or_else(|| DMatrix::zeros(f(x).len(), 0)))
}

/// Central-difference gradient of a scalar map.
pub fn finite_diff_gradient<F>(f: F, x: &DVector<f64>, step: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let mut probe = x.clone();
    let mut grad = DVector::zeros(n);
    for j in 0..n {
        let h = probe_step(step, x[j]);
        probe[j] = x[j] + h;
        let fp = f(&probe);
        probe[j] = x[j] - h;
        let fm = f(&probe);
        probe[j] = x[j];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::DifferentiationFailure { coordinate: j });
        }
        grad[j] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference Hessian of a scalar map. Symmetric by construction:
/// only the upper triangle is probed and mirrored.
pub fn finite_diff_hessian<F>(f: F, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::DifferentiationFailure { coordinate: 0 });
    }
    let mut probe = x.clone();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let hi = probe_step(step, x[i]);
        probe[i] = x[i] + hi;
        let fp = f(&probe);
        probe[i] = x[i] - hi;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::DifferentiationFailure { coordinate: i });
        }
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in (i + 1)..n {
            let hj = probe_step(step, x[j]);
            let mut eval = |si: f64, sj: f64| -> Result<f64> {
                probe[i] = x[i] + si * hi;
                probe[j] = x[j] + sj * hj;
                let v = f(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::DifferentiationFailure { coordinate: j })
                }
            };
            let fpp = eval(1.0, 1.0)?;
            let fpm = eval(1.0, -1.0)?;
            let fmp = eval(-1.0, 1.0)?;
            let fmm = eval(-1.0, -1.0)?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Quadratic expansion of a stage cost around `(x, u)`.
#[derive(Debug, Clone)]
pub struct CostExpansion {
    pub value: f64,
    pub cx: DVector<f64>,
    pub cu: DVector<f64>,
    pub cxx: DMatrix<f64>,
    pub cuu: DMatrix<f64>,
    pub cux: DMatrix<f64>,
}

/// Value, gradients and Hessian blocks of `c(x, u)` by central differences.
///
/// The joint Hessian over `[x; u]` is built symmetric and then split into
/// the `xx`, `uu` and `ux` blocks. `step` controls the gradient probes;
/// Hessian probes use `hessian_step`.
pub fn quadratize_cost<F>(
    c: F,
    x: &DVector<f64>,
    u: &DVector<f64>,
    step: f64,
    hessian_step: f64,
) -> Result<CostExpansion>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    let nx = x.len();
    let nu = u.len();
    let mut z = DVector::zeros(nx + nu);
    z.rows_mut(0, nx).copy_from(x);
    z.rows_mut(nx, nu).copy_from(u);

    let joint = |z: &DVector<f64>| -> f64 {
        let xs = DVector::from(z.rows(0, nx));
        let us = DVector::from(z.rows(nx, nu));
        c(&xs, &us)
    };

    let value = joint(&z);
    if !value.is_finite() {
        return Err(Error::DifferentiationFailure { coordinate: 0 });
    }
    let grad = finite_diff_gradient(joint, &z, step)?;
    let hess = finite_diff_hessian(joint, &z, hessian_step)?;

    Ok(CostExpansion {
        value,
        cx: DVector::from(grad.rows(0, nx)),
        cu: DVector::from(grad.rows(nx, nu)),
        cxx: DMatrix::from(hess.view((0, 0), (nx, nx))),
        cuu: DMatrix::from(hess.view((nx, nx), (nu, nu))),
        cux: DMatrix::from(hess.view((nx, 0), (nu, nx))),
    })
}

/// Symmetrize in place: `(H + H^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Clamp the eigenvalues of a symmetric matrix from below.
///
/// Used to repair cost Hessian control blocks before they are handed to the
/// QP: eigenvalues below `floor` are raised to `floor`.
pub fn clamp_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    let mut changed = false;
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
            changed = true;
        }
    }
    if !changed {
        return sym;
    }
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&vals) * v.transpose()
}
