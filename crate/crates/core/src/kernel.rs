//! Covariance kernels.
//!
//! Only the exponential (Ornstein-Uhlenbeck) kernel ships. Everything that needs
//! covariance values goes through [`Covariance`], so another stationary kernel
//! can be plugged into the Vecchia factor builder without touching it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sill and decay of the exponential kernel `σ² exp(-φ dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub sigma2: f64,
    /// Decay rate in inverse time units.
    pub phi: f64,
}

/// Nugget (measurement-error) variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub tau2: f64,
}

impl KernelParams {
    pub fn new(sigma2: f64, phi: f64) -> Result<Self> {
        let params = KernelParams { sigma2, phi };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Domain(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Domain(format!("phi must be positive, got {}", self.phi)));
        }
        Ok(())
    }
}

impl NoiseParams {
    pub fn new(tau2: f64) -> Result<Self> {
        if !(tau2 > 0.0 && tau2.is_finite()) {
            return Err(Error::Domain(format!("tau2 must be positive, got {tau2}")));
        }
        Ok(NoiseParams { tau2 })
    }
}

/// A stationary covariance function of the absolute time gap.
pub trait Covariance: Sync {
    /// Covariance at gap `dt >= 0`. Callers guarantee the sign.
    fn cov(&self, dt: f64) -> f64;

    /// Marginal variance, `cov(0)`.
    fn sill(&self) -> f64 {
        self.cov(0.0)
    }
}

impl Covariance for KernelParams {
    #[inline]
    fn cov(&self, dt: f64) -> f64 {
        self.sigma2 * (-self.phi * dt).exp()
    }

    #[inline]
    fn sill(&self) -> f64 {
        self.sigma2
    }
}

/// `σ² exp(-φ dt)`, rejecting negative gaps.
pub fn exp_cov(dt: f64, params: &KernelParams) -> Result<f64> {
    if dt.is_nan() || dt < 0.0 {
        return Err(Error::Domain(format!("time gap must be non-negative, got {dt}")));
    }
    Ok(params.cov(dt))
}

/// Dense covariance matrix over `times`. Meant for neighbour blocks and oracles.
pub fn cov_matrix<K: Covariance + ?Sized>(times: &[f64], kernel: &K) -> DMatrix<f64> {
    let n = times.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = kernel.sill();
        for j in 0..i {
            let v = kernel.cov((times[i] - times[j]).abs());
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gap_returns_sill() {
        let p = KernelParams::new(1.0, 1.0).unwrap();
        assert_eq!(exp_cov(0.0, &p).unwrap(), 1.0);
        let p = KernelParams::new(3.7, 0.2).unwrap();
        assert_eq!(exp_cov(0.0, &p).unwrap(), 3.7);
    }

    #[test]
    fn closed_form_values() {
        // 2 e^-1 and e^-1 to 16 digits
        let p = KernelParams::new(2.0, 0.5).unwrap();
        assert!((exp_cov(2.0, &p).unwrap() - 0.735_758_882_342_884_6).abs() < 1e-15);
        let p = KernelParams::new(1.0, 1.0).unwrap();
        assert!((exp_cov(1.0, &p).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn negative_gap_is_domain_error() {
        let p = KernelParams::new(1.0, 1.0).unwrap();
        assert!(matches!(exp_cov(-1e-9, &p), Err(Error::Domain(_))));
        assert!(matches!(exp_cov(f64::NAN, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(0.0, 1.0).is_err());
        assert!(KernelParams::new(1.0, -1.0).is_err());
        assert!(NoiseParams::new(0.0).is_err());
        assert!(NoiseParams::new(f64::INFINITY).is_err());
    }

    #[test]
    fn small_matrices() {
        let p = KernelParams::new(3.0, 1.0).unwrap();
        let c = cov_matrix(&[5.0], &p);
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c[(0, 0)], 3.0);

        let p = KernelParams::new(1.0, 1.0).unwrap();
        let c = cov_matrix(&[0.0, 1.0], &p);
        let e1 = (-1.0f64).exp();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(1, 1)], 1.0);
        assert!((c[(0, 1)] - e1).abs() < 1e-16);
        assert_eq!(c[(0, 1)], c[(1, 0)]);

        assert_eq!(cov_matrix(&[], &p).shape(), (0, 0));
    }

    #[test]
    fn effective_range_below_five_percent() {
        let p = KernelParams::new(2.0, 0.7).unwrap();
        let dt = 3.0 / p.phi;
        assert!(exp_cov(dt, &p).unwrap() / p.sigma2 < 0.05);
        assert!(((-3.0f64).exp() - 0.0498).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn monotone_and_vanishing(sigma2 in 0.01f64..10.0, phi in 0.01f64..10.0,
                                  a in 0.0f64..50.0, b in 0.0f64..50.0) {
            let p = KernelParams::new(sigma2, phi).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let clo = exp_cov(lo, &p).unwrap();
            let chi = exp_cov(hi, &p).unwrap();
            prop_assert!(chi <= clo);
            prop_assert!(chi >= 0.0);
            prop_assert!(exp_cov(1e4 / phi, &p).unwrap() < 1e-300);
        }

        #[test]
        fn random_times_give_spd_symmetric_matrix(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut times: Vec<f64> = (0..50).map(|_| rng.random::<f64>() * 20.0).collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            let p = KernelParams::new(rng.random_range(0.1..5.0), rng.random_range(0.1..5.0)).unwrap();
            let c = cov_matrix(&times, &p);
            prop_assert_eq!(c.clone(), c.transpose());
            prop_assert!(c.cholesky().is_some());
        }
    }
}
