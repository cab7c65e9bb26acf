//! Tone-curve remapping of attention masks applied at inference time.
//!
//! `h(m; n)` is an S-shaped curve symmetric about (0.5, 0.5): `n > 1` pushes
//! values away from 0.5, `n < 1` pulls them toward it and `n = 0` flattens the
//! curve to the constant 0.5. `g(m; n, beta) = (1 + beta) h(m; n) - beta`
//! stretches the lower end down to `-beta`, so the feature multiplier
//! `1 + g` ranges over `[1 - beta, 2]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub n: f64,
    pub beta: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl TransformParams {
    /// `g(m; 1, 0) = m`: inference matches training.
    pub const IDENTITY: Self = Self { n: 1.0, beta: 0.0 };

    pub fn new(n: f64, beta: f64) -> Result<Self> {
        let p = Self { n, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n >= 0.0 && self.n.is_finite()) {
            return Err(Error::validation(format!("n must be finite and >= 0, got {}", self.n)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::validation(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

fn check_domain(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::Domain(format!("mask value {m} outside [0, 1]")))
    }
}

/// Symmetric tone curve; `0^0` is taken as 1.
pub fn h(m: f64, n: f64) -> Result<f64> {
    check_domain(m)?;
    Ok(h_unchecked(m, n))
}

#[inline]
fn h_unchecked(m: f64, n: f64) -> f64 {
    if m < 0.5 {
        (m / 0.5).powf(n) / 2.0
    } else {
        1.0 - ((1.0 - m) / 0.5).powf(n) / 2.0
    }
}

pub fn g(m: f64, params: TransformParams) -> Result<f64> {
    Ok((1.0 + params.beta) * h(m, params.n)? - params.beta)
}

/// Elementwise `1 + g(mask)`: the feature multiplier used at inference.
pub fn transform_mask(mask: &Tensor, params: TransformParams) -> Result<Tensor> {
    params.validate()?;
    if let Some(&bad) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("mask value {bad} outside [0, 1]")));
    }
    let (n, beta) = (params.n, params.beta);
    Ok(mask.map(|m| 1.0 + ((1.0 + beta) * h_unchecked(m, n) - beta)))
}

/// `count` evenly spaced `(m, g(m))` pairs covering `[0, 1]`.
pub fn curve_samples(params: TransformParams, count: usize) -> Result<Vec<(f64, f64)>> {
    params.validate()?;
    if count < 2 {
        return Err(Error::validation(format!("curve needs at least 2 samples, got {count}")));
    }
    let last = (count - 1) as f64;
    (0..count)
        .map(|i| {
            let m = if i == count - 1 { 1.0 } else { i as f64 / last };
            g(m, params).map(|v| (m, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> impl Iterator<Item = f64> {
        (0..=1000).map(|i| i as f64 / 1000.0)
    }

    #[test]
    fn linear_curve_is_identity() {
        for m in grid() {
            assert_eq!(h(m, 1.0).unwrap(), m);
            assert_eq!(g(m, TransformParams::IDENTITY).unwrap(), m);
        }
    }

    #[test]
    fn endpoints_and_midpoint() {
        for n in [0.5, 1.0, 2.0, 4.0] {
            assert_eq!(h(0.0, n).unwrap(), 0.0);
            assert_eq!(h(1.0, n).unwrap(), 1.0);
        }
        for n in [0.0, 0.5, 3.0] {
            assert_eq!(h(0.5, n).unwrap(), 0.5);
        }
    }

    #[test]
    fn hand_evaluated_points() {
        assert_eq!(h(0.25, 2.0).unwrap(), 0.125);
        assert_eq!(h(0.75, 2.0).unwrap(), 0.875);
        let p = TransformParams::new(2.0, 0.5).unwrap();
        assert!((g(0.25, p).unwrap() - -0.3125).abs() < 1e-15);
        let full = TransformParams::new(2.0, 1.0).unwrap();
        assert_eq!(g(0.0, full).unwrap(), -1.0);
        assert_eq!(g(1.0, full).unwrap(), 1.0);
        assert_eq!(g(0.5, full).unwrap(), 0.0);
    }

    #[test]
    fn zero_exponent_is_flat() {
        for m in grid() {
            assert_eq!(h(m, 0.0).unwrap(), 0.5);
        }
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(h(-0.01, 1.0), Err(Error::Domain(_))));
        assert!(matches!(h(1.5, 1.0), Err(Error::Domain(_))));
        let t = Tensor::from_slice(&[0.2, 1.2]);
        assert!(matches!(transform_mask(&t, TransformParams::IDENTITY), Err(Error::Domain(_))));
        assert!(TransformParams::new(-1.0, 0.0).is_err());
        assert!(TransformParams::new(1.0, 1.5).is_err());
    }

    #[test]
    fn mask_multipliers() {
        let mask = Tensor::from_slice(&[0.0, 0.1, 0.5, 0.93, 1.0]);
        let id = transform_mask(&mask, TransformParams::IDENTITY).unwrap();
        let expected: Vec<f64> = mask.data().iter().map(|m| 1.0 + m).collect();
        assert_eq!(id.data(), expected.as_slice());

        let kill = transform_mask(&Tensor::from_slice(&[0.0]), TransformParams::new(3.0, 1.0).unwrap()).unwrap();
        assert_eq!(kill.data(), &[0.0]);

        let flat = transform_mask(&mask, TransformParams::new(0.0, 0.0).unwrap()).unwrap();
        assert!(flat.data().iter().all(|&v| v == 1.5));
        let unit = transform_mask(&mask, TransformParams::new(0.0, 1.0).unwrap()).unwrap();
        assert!(unit.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn curve_sampling() {
        let id = curve_samples(TransformParams::IDENTITY, 3).unwrap();
        assert_eq!(id, vec![(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]);
        let steep = curve_samples(TransformParams::new(4.0, 0.0).unwrap(), 3).unwrap();
        assert_eq!(steep, vec![(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]);
        let many = curve_samples(TransformParams::new(2.0, 0.3).unwrap(), 7).unwrap();
        assert_eq!(many.first().unwrap().0, 0.0);
        assert_eq!(many.last().unwrap().0, 1.0);
        assert!(many.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(matches!(curve_samples(TransformParams::IDENTITY, 1), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn point_symmetry(m in 0.0f64..=1.0, n in 0.0f64..6.0) {
            let lhs = h(1.0 - m, n).unwrap();
            let rhs = 1.0 - h(m, n).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn steeper_curves_emphasise(m in 0.0f64..=1.0, n in 1.0f64..6.0, beta in 0.0f64..=1.0) {
            let p = TransformParams::new(n, beta).unwrap();
            let lin = TransformParams::new(1.0, beta).unwrap();
            let (gn, g1) = (g(m, p).unwrap(), g(m, lin).unwrap());
            if m > 0.5 {
                prop_assert!(gn >= g1 - 1e-15);
            } else if m < 0.5 {
                prop_assert!(gn <= g1 + 1e-15);
            }
            prop_assert!(gn >= -beta - 1e-15 && gn <= 1.0 + 1e-15);
        }

        #[test]
        fn monotone_for_positive_exponent(a in 0.0f64..=1.0, b in 0.0f64..=1.0, n in 0.01f64..6.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(h(lo, n).unwrap() <= h(hi, n).unwrap());
        }
    }
}
