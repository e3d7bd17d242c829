use serde::{Deserialize, Serialize};

use super::SmpcError;

pub const DEFAULT_SCALE: u32 = 24;

/// Real vector encoded as two's-complement fixed point in `Z / 2^64`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointVector {
    pub values: Vec<u64>,
    pub scale_exponent: u32,
}

impl FixedPointVector {
    pub fn zeros(dim: usize, scale_exponent: u32) -> Self {
        Self { values: vec![0; dim], scale_exponent }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn wrapping_add_assign(&mut self, other: &FixedPointVector) -> Result<(), SmpcError> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = a.wrapping_add(*b);
        }
        Ok(())
    }

    pub fn wrapping_sub_assign(&mut self, other: &[u64]) -> Result<(), SmpcError> {
        if other.len() != self.dim() {
            return Err(SmpcError::DimensionMismatch { expected: self.dim(), actual: other.len() });
        }
        for (a, b) in self.values.iter_mut().zip(other) {
            *a = a.wrapping_sub(*b);
        }
        Ok(())
    }

    fn check_compatible(&self, other: &FixedPointVector) -> Result<(), SmpcError> {
        if other.dim() != self.dim() {
            return Err(SmpcError::DimensionMismatch { expected: self.dim(), actual: other.dim() });
        }
        if other.scale_exponent != self.scale_exponent {
            return Err(SmpcError::Protocol(format!(
                "scale mismatch: 2^{} vs 2^{}",
                self.scale_exponent, other.scale_exponent
            )));
        }
        Ok(())
    }
}

/// Maps each `x_i` to `round(x_i * 2^scale)` reinterpreted as unsigned.
pub fn encode_fixed(x: &[f64], scale_exponent: u32) -> Result<FixedPointVector, SmpcError> {
    if scale_exponent >= 63 {
        return Err(SmpcError::Protocol(format!("scale exponent {scale_exponent} leaves no integer bits")));
    }
    let factor = (scale_exponent as f64).exp2();
    let limit = ((63 - scale_exponent) as f64).exp2();
    let values = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() || v.abs() >= limit {
                return Err(SmpcError::Overflow { index: i, value: v, limit });
            }
            Ok((v * factor).round() as i64 as u64)
        })
        .collect::<Result<_, _>>()?;
    Ok(FixedPointVector { values, scale_exponent })
}

pub fn decode_fixed(v: &FixedPointVector) -> Vec<f64> {
    let factor = (v.scale_exponent as f64).exp2();
    v.values.iter().map(|&u| u as i64 as f64 / factor).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_encodes_to_scale() {
        assert_eq!(encode_fixed(&[1.0], 24).unwrap().values, vec![16_777_216]);
    }

    #[test]
    fn minus_one_wraps() {
        let expected = (1u128 << 64) - 16_777_216;
        assert_eq!(encode_fixed(&[-1.0], 24).unwrap().values, vec![expected as u64]);
    }

    #[test]
    fn out_of_range_is_an_error() {
        assert!(matches!(encode_fixed(&[2f64.powi(39)], 24), Err(SmpcError::Overflow { .. })));
        assert!(encode_fixed(&[f64::NAN], 24).is_err());
        assert!(encode_fixed(&[2f64.powi(38)], 24).is_ok());
    }

    proptest! {
        #[test]
        fn decode_is_within_rounding_bound(x in proptest::collection::vec(-1e9f64..1e9, 1..20)) {
            let back = decode_fixed(&encode_fixed(&x, 24).unwrap());
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 2f64.powi(-24));
            }
        }
    }
}
