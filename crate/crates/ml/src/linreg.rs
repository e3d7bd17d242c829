use nalgebra::{DMatrix, DVector};

use crate::error::{MlError, MlResult};
use crate::linalg::{from_row_major, solve_spd, row_major};

/// Sufficient statistics of one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct LinregStats {
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub n: f64,
}

pub fn local_linreg_stats(x: &DMatrix<f64>, y: &DVector<f64>) -> MlResult<LinregStats> {
    if x.nrows() != y.len() {
        return Err(MlError::invalid(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    Ok(LinregStats { xtx: x.tr_mul(x), xty: x.tr_mul(y), n: x.nrows() as f64 })
}

impl LinregStats {
    pub fn dim(&self) -> usize {
        self.xty.len()
    }

    /// `XtX` row-major, `Xty`, `n`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = row_major(&self.xtx);
        out.extend(self.xty.iter());
        out.push(self.n);
        out
    }

    pub fn from_slice(d: usize, values: &[f64]) -> MlResult<Self> {
        if values.len() != Self::len_for(d) {
            return Err(MlError::invalid(format!("linreg stats of length {} for dimension {d}", values.len())));
        }
        Ok(Self {
            xtx: from_row_major(d, &values[..d * d]),
            xty: DVector::from_column_slice(&values[d * d..d * d + d]),
            n: values[d * d + d],
        })
    }

    pub fn len_for(d: usize) -> usize {
        d * d + d + 1
    }

    pub fn add(&mut self, other: &LinregStats) {
        self.xtx += &other.xtx;
        self.xty += &other.xty;
        self.n += other.n;
    }
}

pub fn aggregate_linreg(stats: &[LinregStats], names: &[String]) -> MlResult<DVector<f64>> {
    let mut it = stats.iter();
    let mut total = it.next().ok_or_else(|| MlError::invalid("no statistics to aggregate"))?.clone();
    for s in it {
        if s.dim() != total.dim() {
            return Err(MlError::invalid(format!("dimension {} vs {}", s.dim(), total.dim())));
        }
        total.add(s);
    }
    solve_spd(&total.xtx, &total.xty, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_example_and_linearity() {
        let x = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let s = local_linreg_stats(&x, &y).unwrap();
        assert_eq!(s.xtx, x);
        assert_eq!(s.xty, y);
        let x2 = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let y2 = DVector::from_vec(vec![1.0, 2.0, 1.0, 2.0]);
        let s2 = local_linreg_stats(&x2, &y2).unwrap();
        assert_eq!(s2.xtx, &s.xtx * 2.0);
        assert_eq!(s2.xty, &s.xty * 2.0);
        assert_eq!(LinregStats::from_slice(2, &s2.to_vec()).unwrap(), s2);
    }

    #[test]
    fn collinear_design_is_singular() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let s = local_linreg_stats(&x, &DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(aggregate_linreg(&[s], &[]), Err(MlError::Singular(_))));
    }
}
