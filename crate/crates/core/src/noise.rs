//! Isotropic Gaussian observation noise on the stacked observation space.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// measurement standard deviation [K]
    pub sigma: f64,
    /// constant noise mean ē [K]
    pub mean: f64,
    /// `(n_t + 1)·n_y`
    pub dim: usize,
}

impl NoiseModel {
    pub fn new(sigma: f64, dim: usize) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Validation(format!("noise standard deviation must be positive, got {sigma}")));
        }
        Ok(Self { sigma, mean: 0.0, dim })
    }

    pub fn with_mean(mut self, mean: f64) -> Self {
        self.mean = mean;
        self
    }

    pub fn precision(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }

    /// `Γ_noise⁻¹ w = σ⁻² w`
    pub fn apply_noise_inverse(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_len("observation vector", self.dim, w.len())?;
        let p = self.precision();
        Ok(w.iter().map(|v| p * v).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scaling() {
        let noise = NoiseModel::new(0.1, 1).unwrap();
        assert!((noise.apply_noise_inverse(&[1.0]).unwrap()[0] - 100.0).abs() < 1e-12);
        let unit = NoiseModel::new(1.0, 3).unwrap();
        assert_eq!(unit.apply_noise_inverse(&[1.0, -2.0, 3.5]).unwrap(), alloc::vec![1.0, -2.0, 3.5]);
        assert!(NoiseModel::new(0.0, 3).is_err());
        assert!(unit.apply_noise_inverse(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn linear_and_positive(w in proptest::collection::vec(-10.0f64..10.0, 4), a in -5.0f64..5.0, sigma in 0.01f64..10.0) {
            let noise = NoiseModel::new(sigma, 4).unwrap();
            let scaled: Vec<f64> = w.iter().map(|v| a * v).collect();
            let lhs = noise.apply_noise_inverse(&scaled).unwrap();
            let rhs = noise.apply_noise_inverse(&w).unwrap();
            for (l, r) in lhs.iter().zip(&rhs) {
                prop_assert!((l - a * r).abs() <= 1e-12 * (1.0 + l.abs()));
            }
            let q: f64 = w.iter().zip(&rhs).map(|(x, y)| x * y).sum();
            if w.iter().any(|&v| v != 0.0) {
                prop_assert!(q > 0.0);
            }
        }
    }
}
