//! Centralized reference fits on pooled rows, written independently of the
//! federated code paths so they can serve as test oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{MlError, MlResult};
use crate::forest::{train_local_trees, Forest, TreeParams};

/// Ordinary least squares by Householder QR.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> MlResult<DVector<f64>> {
    if x.nrows() < x.ncols() {
        return Err(MlError::invalid(format!("{} rows for {} coefficients", x.nrows(), x.ncols())));
    }
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| MlError::Singular("R factor is singular".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonFit {
    pub beta: DVector<f64>,
    /// Iterates after each update, starting from the first step.
    pub trajectory: Vec<DVector<f64>>,
    pub converged: bool,
    /// Why iteration ended early, if it did.
    pub stopped: Option<String>,
}

/// Unpenalized Newton iterations from zero, same stopping rule as the
/// federated app. A singular Hessian ends the fit at the last iterate.
pub fn newton_logreg(x: &DMatrix<f64>, y: &DVector<f64>, tol: f64, max_iter: usize) -> NewtonFit {
    let (n, d) = (x.nrows(), x.ncols());
    let mut beta = DVector::zeros(d);
    let mut trajectory = Vec::new();
    for _ in 0..max_iter {
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for i in 0..n {
            let z: f64 = (0..d).map(|j| x[(i, j)] * beta[j]).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            let w = p * (1.0 - p);
            for a in 0..d {
                g[a] += x[(i, a)] * (y[i] - p);
                for b in 0..d {
                    h[(a, b)] += w * x[(i, a)] * x[(i, b)];
                }
            }
        }
        let step: Option<DVector<f64>> = h.clone().lu().solve(&g);
        let step = match step {
            Some(s) if s.iter().all(|v| v.is_finite()) && rcond(&h) > 1e-12 => s,
            _ => {
                return NewtonFit { beta, trajectory, converged: false, stopped: Some("singular Hessian".into()) };
            }
        };
        beta += &step;
        trajectory.push(beta.clone());
        if step.norm() < tol {
            return NewtonFit { beta, trajectory, converged: true, stopped: None };
        }
    }
    NewtonFit { beta, trajectory, converged: false, stopped: None }
}

/// Reciprocal condition number from the singular values.
fn rcond(m: &DMatrix<f64>) -> f64 {
    let s = m.clone().singular_values();
    let max = s.iter().copied().fold(0.0, f64::max);
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

pub fn forest(x: &DMatrix<f64>, y: &[f64], n_trees: usize, params: TreeParams, base_seed: u64) -> MlResult<Forest> {
    Ok(Forest { task: params.task, n_classes: params.n_classes, trees: train_local_trees(x, y, n_trees, params, base_seed)? })
}

/// Pooled standardization reference: column means and population standard
/// deviations by two passes.
pub fn mean_std(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for col in x.column_iter() {
        let mu = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        means.push(mu);
        stds.push(var.sqrt());
    }
    (means, stds)
}
