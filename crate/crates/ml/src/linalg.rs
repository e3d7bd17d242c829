use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MlError, MlResult};

/// Largest condition number accepted before a system counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Solves `a x = b` for symmetric positive definite `a` by Cholesky, after
/// an eigenvalue-based conditioning check. `names` labels the unknowns in
/// the diagnostic.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, names: &[String]) -> MlResult<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(MlError::invalid(format!("system {}x{} with rhs {}", a.nrows(), a.ncols(), b.len())));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(MlError::Singular("system contains non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(a.clone());
    let (imin, &lmin) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).expect("non-empty");
    let lmax = eig.eigenvalues.iter().copied().fold(f64::MIN, f64::max);
    let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if cond > MAX_CONDITION {
        let v = eig.eigenvectors.column(imin);
        let mut involved: Vec<(usize, f64)> = v.iter().map(|c| c.abs()).enumerate().filter(|(_, c)| *c > 0.1).collect();
        involved.sort_by(|x, y| y.1.total_cmp(&x.1));
        let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        let features: Vec<String> = involved.iter().map(|(i, _)| label(*i)).collect();
        return Err(MlError::Singular(format!(
            "condition estimate {cond:.3e} exceeds {MAX_CONDITION:.0e}; near-degenerate direction spans [{}]",
            features.join(", ")
        )));
    }
    let chol = a.clone().cholesky().ok_or_else(|| MlError::Singular("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn from_row_major(d: usize, values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_and_flags_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let x = solve_spd(&a, &DVector::from_vec(vec![1.0, 2.0]), &[]).unwrap();
        assert!((&a * &x - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-14);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = solve_spd(&s, &DVector::zeros(2), &["a".into(), "b".into()]).unwrap_err().to_string();
        assert!(err.contains("a") && err.contains("b"), "{err}");
    }
}
