use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MlError, MlResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    Standardize,
    MinMax,
    MaxAbs,
}

impl std::str::FromStr for ScalingMode {
    type Err = MlError;

    fn from_str(s: &str) -> MlResult<Self> {
        match s {
            "standardize" | "z-score" => Ok(Self::Standardize),
            "minmax" | "min-max" => Ok(Self::MinMax),
            "maxabs" | "max-abs" => Ok(Self::MaxAbs),
            other => Err(MlError::invalid(format!("unknown scaling mode {other:?}"))),
        }
    }
}

/// Per-feature moments of one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: f64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub max_abs: Vec<f64>,
}

impl Moments {
    pub fn of(x: &DMatrix<f64>) -> Self {
        let d = x.ncols();
        let mut m = Moments {
            n: x.nrows() as f64,
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
            min: vec![f64::INFINITY; d],
            max: vec![f64::NEG_INFINITY; d],
            max_abs: vec![0.0; d],
        };
        for j in 0..d {
            for &v in x.column(j).iter() {
                m.sum[j] += v;
                m.sum_sq[j] += v * v;
                m.min[j] = m.min[j].min(v);
                m.max[j] = m.max[j].max(v);
                m.max_abs[j] = m.max_abs[j].max(v.abs());
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn merge(&mut self, other: &Moments) -> MlResult<()> {
        if other.dim() != self.dim() {
            return Err(MlError::invalid(format!("moments of {} features merged into {}", other.dim(), self.dim())));
        }
        self.n += other.n;
        for j in 0..self.dim() {
            self.sum[j] += other.sum[j];
            self.sum_sq[j] += other.sum_sq[j];
            self.min[j] = self.min[j].min(other.min[j]);
            self.max[j] = self.max[j].max(other.max[j]);
            self.max_abs[j] = self.max_abs[j].max(other.max_abs[j]);
        }
        Ok(())
    }

    /// `n` followed by five values per feature.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = vec![self.n];
        for j in 0..self.dim() {
            out.extend([self.sum[j], self.sum_sq[j], self.min[j], self.max[j], self.max_abs[j]]);
        }
        out
    }

    pub fn from_slice(values: &[f64]) -> MlResult<Self> {
        if values.is_empty() || (values.len() - 1) % 5 != 0 {
            return Err(MlError::invalid(format!("moment vector of length {}", values.len())));
        }
        let d = (values.len() - 1) / 5;
        let col = |k: usize| (0..d).map(|j| values[1 + 5 * j + k]).collect();
        Ok(Self { n: values[0], sum: col(0), sum_sq: col(1), min: col(2), max: col(3), max_abs: col(4) })
    }
}

/// `x' = (x - shift) / scale` per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mode: ScalingMode,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    /// Features left untouched because their spread is zero.
    pub passthrough: Vec<usize>,
}

pub fn aggregate_norm(moments: &Moments, mode: ScalingMode) -> MlResult<Scaling> {
    if moments.n <= 0.0 {
        return Err(MlError::invalid("no samples to normalize"));
    }
    let d = moments.dim();
    let mut shift = vec![0.0; d];
    let mut scale = vec![1.0; d];
    let mut passthrough = Vec::new();
    for j in 0..d {
        let constant = moments.min[j] == moments.max[j];
        let (s, c) = match mode {
            ScalingMode::Standardize => {
                let mu = moments.sum[j] / moments.n;
                let var = (moments.sum_sq[j] / moments.n - mu * mu).max(0.0);
                (mu, var.sqrt())
            }
            ScalingMode::MinMax => (moments.min[j], moments.max[j] - moments.min[j]),
            ScalingMode::MaxAbs => (0.0, moments.max_abs[j]),
        };
        if constant || c == 0.0 {
            passthrough.push(j);
        } else {
            shift[j] = s;
            scale[j] = c;
        }
    }
    Ok(Scaling { mode, shift, scale, passthrough })
}

pub fn apply_scaling(x: &mut DMatrix<f64>, params: &Scaling) {
    for j in 0..x.ncols() {
        for v in x.column_mut(j).iter_mut() {
            *v = (*v - params.shift[j]) / params.scale[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_example() {
        let mut m = Moments::of(&DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
        m.merge(&Moments::of(&DMatrix::from_column_slice(2, 1, &[3.0, 4.0]))).unwrap();
        let s = aggregate_norm(&m, ScalingMode::Standardize).unwrap();
        assert_eq!(s.shift, vec![2.5]);
        assert!((s.scale[0] * s.scale[0] - 1.25).abs() < 1e-15);
        assert_eq!(Moments::from_slice(&m.to_vec()).unwrap(), m);
    }

    #[test]
    fn modes_hit_their_ranges_and_constants_pass_through() {
        let x = DMatrix::from_row_slice(3, 2, &[-4.0, 7.0, 2.0, 7.0, 1.0, 7.0]);
        let m = Moments::of(&x);
        let mut y = x.clone();
        let s = aggregate_norm(&m, ScalingMode::MinMax).unwrap();
        assert_eq!(s.passthrough, vec![1]);
        apply_scaling(&mut y, &s);
        assert_eq!(y.column(0).as_slice(), &[0.0, 1.0, 5.0 / 6.0]);
        assert_eq!(y.column(1), x.column(1));
        let mut z = x.clone();
        apply_scaling(&mut z, &aggregate_norm(&m, ScalingMode::MaxAbs).unwrap());
        assert_eq!(z.column(0).as_slice(), &[-1.0, 0.5, 0.25]);
    }
}
