//! Fourier positional encoding.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    pub m_x: usize,
    pub m_d: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { m_x: 10, m_d: 4 }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_x == 0 || self.m_d == 0 {
            return Err(Error::Config("encoding frequency counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        6 * self.m_x
    }

    pub fn direction_dim(&self) -> usize {
        6 * self.m_d
    }
}

/// Per scalar `p`: `[cos(2⁰πp), sin(2⁰πp), …, cos(2^{m-1}πp), sin(2^{m-1}πp)]`.
pub fn positional_encode(values: &[f64], m: usize) -> Result<Vec<f32>> {
    if m == 0 {
        return Err(Error::Invalid("encoding needs m >= 1".into()));
    }
    let mut out = Vec::with_capacity(values.len() * 2 * m);
    encode_into(values, m, &mut out);
    Ok(out)
}

pub(crate) fn encode_into(values: &[f64], m: usize, out: &mut Vec<f32>) {
    for &p in values {
        let mut f = PI;
        for _ in 0..m {
            let (s, c) = (f * p).sin_cos();
            out.push(c as f32);
            out.push(s as f32);
            f *= 2.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input() {
        assert_eq!(positional_encode(&[0.0], 3).unwrap(), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn first_pair_values() {
        let half = positional_encode(&[0.5], 1).unwrap();
        assert!(half[0].abs() < 1e-7 && (half[1] - 1.0).abs() < 1e-7);
        let one = positional_encode(&[1.0], 1).unwrap();
        assert!((one[0] + 1.0).abs() < 1e-7 && one[1].abs() < 1e-7);
    }

    #[test]
    fn rejects_zero_frequencies() {
        assert!(positional_encode(&[0.1], 0).is_err());
    }

    #[test]
    fn length_is_two_m_per_scalar() {
        assert_eq!(positional_encode(&[0.1, -0.4, 0.9], 5).unwrap().len(), 30);
    }
}
