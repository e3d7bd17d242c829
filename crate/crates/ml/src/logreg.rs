use nalgebra::{DMatrix, DVector};

use crate::error::{MlError, MlResult};
use crate::linalg::{from_row_major, solve_spd, row_major};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 50;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood of `y` under `sigmoid(x beta)`.
pub fn log_likelihood(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let z = x * beta;
    z.iter()
        .zip(y.iter())
        .map(|(&z, &y)| {
            // log(1 + e^z) computed without overflow.
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            y * z - softplus
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientHessian {
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
    pub n: f64,
}

impl GradientHessian {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn len_for(d: usize) -> usize {
        d + d * d + 1
    }

    /// `g`, `H` row-major, `n`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.g.iter().copied().collect();
        out.extend(row_major(&self.h));
        out.push(self.n);
        out
    }

    pub fn from_slice(d: usize, values: &[f64]) -> MlResult<Self> {
        if values.len() != Self::len_for(d) {
            return Err(MlError::invalid(format!("gradient/Hessian of length {} for dimension {d}", values.len())));
        }
        Ok(Self {
            g: DVector::from_column_slice(&values[..d]),
            h: from_row_major(d, &values[d..d + d * d]),
            n: values[d + d * d],
        })
    }

    pub fn add(&mut self, other: &GradientHessian) {
        self.g += &other.g;
        self.h += &other.h;
        self.n += other.n;
    }
}

pub fn local_logreg_step(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> MlResult<GradientHessian> {
    if x.nrows() != y.len() || x.ncols() != beta.len() {
        return Err(MlError::invalid(format!(
            "X is {}x{}, y has {}, beta has {}",
            x.nrows(),
            x.ncols(),
            y.len(),
            beta.len()
        )));
    }
    let p = (x * beta).map(sigmoid);
    let g = x.tr_mul(&(y - &p));
    let w = p.map(|p| p * (1.0 - p));
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let mut h = x.tr_mul(&xw);
    // Mirror the upper triangle so H is exactly symmetric.
    for r in 1..h.nrows() {
        for c in 0..r {
            h[(r, c)] = h[(c, r)];
        }
    }
    Ok(GradientHessian { g, h, n: x.nrows() as f64 })
}

/// One Newton step. Returns the new coefficients and whether the step was
/// below `tol`.
pub fn newton_update(beta: &DVector<f64>, total: &GradientHessian, tol: f64, names: &[String]) -> MlResult<(DVector<f64>, bool)> {
    let step = solve_spd(&total.h, &total.g, names).map_err(|e| match e {
        MlError::Singular(msg) => MlError::Singular(format!("Hessian is singular ({msg}); perfect separation likely")),
        other => other,
    })?;
    let next = beta + &step;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(MlError::Singular("coefficients diverged; perfect separation likely".into()));
    }
    Ok((next, step.norm() < tol))
}

pub fn aggregate_logreg_step(
    parts: &[GradientHessian],
    beta: &DVector<f64>,
    tol: f64,
    names: &[String],
) -> MlResult<(DVector<f64>, bool)> {
    let mut it = parts.iter();
    let mut total = it.next().ok_or_else(|| MlError::invalid("no gradients to aggregate"))?.clone();
    for p in it {
        if p.dim() != total.dim() {
            return Err(MlError::invalid(format!("dimension {} vs {}", p.dim(), total.dim())));
        }
        total.add(p);
    }
    newton_update(beta, &total, tol, names)
}

pub fn predict_proba(x: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    (x * beta).iter().map(|&z| sigmoid(z)).collect()
}

pub fn predict_class(x: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    predict_proba(x, beta).into_iter().map(|p| if p >= 0.5 { 1.0 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_at_zero() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, -1.0, 1.0, 0.5]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        let gh = local_logreg_step(&x, &y, &DVector::zeros(2)).unwrap();
        assert_eq!(gh.g, x.tr_mul(&y.map(|v| v - 0.5)));
        assert_eq!(gh.h, x.tr_mul(&x) * 0.25);
        assert_eq!(GradientHessian::from_slice(2, &gh.to_vec()).unwrap(), gh);
    }

    #[test]
    fn zero_gradient_is_stationary() {
        let gh = GradientHessian { g: DVector::zeros(2), h: DMatrix::identity(2, 2), n: 4.0 };
        let beta = DVector::from_vec(vec![0.3, -0.2]);
        let (next, converged) = aggregate_logreg_step(&[gh], &beta, DEFAULT_TOL, &[]).unwrap();
        assert_eq!(next, beta);
        assert!(converged);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(log_likelihood(&DMatrix::from_element(1, 1, 1.0), &DVector::from_element(1, 0.0), &DVector::from_element(1, 800.0)).is_finite());
    }
}
