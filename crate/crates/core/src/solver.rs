//! Damped Gauss-Newton for small dense nonlinear least squares, with
//! optional box constraints handled by projection after each step.
//!
//! The solver only ever accepts steps that decrease the objective
//! `|r(x)|^2`, so the objective history it reports is non-increasing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GaussNewtonOptions {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop when the accepted step norm falls below this.
    pub step_tolerance: f64,
    /// Stop when the relative objective decrease falls below this.
    pub objective_tolerance: f64,
    /// Per-parameter `(lo, hi)` bounds; empty means unconstrained.
    pub bounds: Vec<(f64, f64)>,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        GaussNewtonOptions {
            max_iterations: 100,
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.3,
            step_tolerance: 1e-12,
            objective_tolerance: 1e-14,
            bounds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussNewtonReport {
    pub objective: f64,
    /// Objective after the initial point and after every accepted step.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn project(x: &mut DVector<f64>, bounds: &[(f64, f64)]) {
    if bounds.is_empty() {
        return;
    }
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds.iter()) {
        *v = v.clamp(lo, hi);
    }
}

/// Minimizes `|r(x)|^2` starting from `x0`.
///
/// `eval` computes the residual vector and, when asked, the Jacobian
/// (rows = residuals, columns = parameters).
pub fn minimize<F>(x0: DVector<f64>, mut eval: F, opts: &GaussNewtonOptions) -> Result<(DVector<f64>, GaussNewtonReport)>
where
    F: FnMut(&DVector<f64>, bool) -> (DVector<f64>, Option<DMatrix<f64>>),
{
    if !opts.bounds.is_empty() && opts.bounds.len() != x0.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} bounds for {} parameters",
            opts.bounds.len(),
            x0.len()
        )));
    }
    let mut x = x0;
    project(&mut x, &opts.bounds);
    let (mut residual, _) = eval(&x, false);
    let mut objective = residual.norm_squared();
    let mut history = vec![objective];
    let mut lambda = opts.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iterations {
        iterations += 1;
        let (r, jac) = eval(&x, true);
        residual = r;
        objective = residual.norm_squared();
        let jac = jac.expect("eval must return a Jacobian when requested");
        let jt = jac.transpose();
        let mut hess = &jt * &jac;
        let grad = &jt * &residual;
        if grad.amax() < 1e-15 {
            converged = true;
            break;
        }
        // Keep the undamped diagonal around for the Levenberg scaling.
        let diag: Vec<f64> = (0..hess.nrows()).map(|i| hess[(i, i)].max(1e-12)).collect();

        let mut accepted = false;
        for _ in 0..25 {
            for (i, d) in diag.iter().enumerate() {
                hess[(i, i)] = d + lambda * d;
            }
            let step = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= opts.lambda_up;
                    continue;
                }
            };
            let mut candidate = &x + &step;
            project(&mut candidate, &opts.bounds);
            let actual_step = (&candidate - &x).norm();
            let (cr, _) = eval(&candidate, false);
            let cobj = cr.norm_squared();
            if cobj < objective {
                x = candidate;
                let rel_drop = (objective - cobj) / objective.max(1e-300);
                objective = cobj;
                history.push(objective);
                lambda = (lambda * opts.lambda_down).max(1e-12);
                accepted = true;
                if actual_step < opts.step_tolerance || rel_drop < opts.objective_tolerance {
                    converged = true;
                }
                break;
            }
            lambda *= opts.lambda_up;
            if actual_step < opts.step_tolerance {
                // Bounds pin the point; nothing more to gain.
                converged = true;
                accepted = false;
                break;
            }
        }
        if !accepted || converged {
            if !accepted {
                converged = true;
            }
            break;
        }
    }

    Ok((x, GaussNewtonReport { objective, history, iterations, converged }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_linear_least_squares_exactly() {
        // r(x) = A x - b with a tall A.
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0, 3.5, -0.5]);
        let eval = |x: &DVector<f64>, want_jac: bool| {
            let r = &a * x - &b;
            (r, want_jac.then(|| a.clone()))
        };
        let (x, report) = minimize(DVector::zeros(2), eval, &GaussNewtonOptions::default()).unwrap();
        // Normal-equation oracle.
        let want = (a.transpose() * &a).try_inverse().unwrap() * (a.transpose() * &b);
        assert!((x - want).norm() < 1e-8);
        assert!(report.converged);
        for w in report.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn rosenbrock_residuals_converge() {
        let eval = |x: &DVector<f64>, want_jac: bool| {
            let r = DVector::from_column_slice(&[10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
            let jac = want_jac.then(|| {
                DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0])
            });
            (r, jac)
        };
        let opts = GaussNewtonOptions { max_iterations: 200, ..Default::default() };
        let (x, report) = minimize(DVector::from_column_slice(&[-1.2, 1.0]), eval, &opts).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6);
        assert!(report.converged);
    }

    #[test]
    fn bounds_are_respected() {
        // Unconstrained minimum at 2, box caps at 1.
        let eval = |x: &DVector<f64>, want_jac: bool| {
            let r = DVector::from_column_slice(&[x[0] - 2.0]);
            (r, want_jac.then(|| DMatrix::from_row_slice(1, 1, &[1.0])))
        };
        let opts = GaussNewtonOptions { bounds: vec![(0.0, 1.0)], ..Default::default() };
        let (x, _) = minimize(DVector::from_column_slice(&[0.5]), eval, &opts).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn start_at_optimum_takes_no_step() {
        let eval = |x: &DVector<f64>, want_jac: bool| {
            let r = DVector::from_column_slice(&[x[0] - 1.0, x[1] + 2.0]);
            (r, want_jac.then(|| DMatrix::identity(2, 2)))
        };
        let (x, report) =
            minimize(DVector::from_column_slice(&[1.0, -2.0]), eval, &GaussNewtonOptions::default()).unwrap();
        assert!(report.iterations <= 2);
        assert!(report.converged);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] + 2.0).abs() < 1e-14);
    }
}
