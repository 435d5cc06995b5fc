//! Synthetic trajectories from the generative model
//! `y = intercept_k + x β + B_S(γ(t)) β_S + w(t) + ε(t)`.
//!
//! Times have exponential gaps, positions follow a Gaussian random walk
//! clamped to a square, and the latent process is simulated exactly through
//! the Markov property of the exponential kernel.

use chrono::{DateTime, FixedOffset, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{clock_hour, CovariateValue, Individual, Observation, TrajectoryDataset};
use crate::kernel::KernelParams;
use crate::splines::{SplineBasisSpec1D, TensorBasisSpec};
use crate::{Error, Result};

/// Cumulative sums of i.i.d. `Exp(rate)` gaps, starting at 0.
pub fn gen_times<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Config(format!("waiting-time rate {rate} must be positive")));
    }
    let gap = Exp::new(rate).map_err(|e| Error::Config(format!("waiting-time rate {rate}: {e}")))?;
    let mut t = 0.0;
    Ok((0..n)
        .map(|i| {
            if i > 0 {
                t += gap.sample(rng);
            }
            t
        })
        .collect())
}

/// Axis-aligned square `[lower, upper]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Square {
    pub lower: f64,
    pub upper: f64,
}

impl Square {
    fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }
}

/// Random walk with per-axis increments `N(0, step_variance · Δt)`, started
/// uniformly in the square; points leaving the square are clamped to its
/// border and the walk resumes from there.
pub fn gen_trajectory<R: Rng + ?Sized>(
    times: &[f64],
    square: &Square,
    step_variance: f64,
    rng: &mut R,
) -> Vec<[f64; 2]> {
    let mut pos = [rng.random_range(square.lower..=square.upper), rng.random_range(square.lower..=square.upper)];
    let mut out = Vec::with_capacity(times.len());
    for (i, t) in times.iter().enumerate() {
        if i > 0 {
            let sd = (step_variance * (t - times[i - 1])).sqrt();
            for v in &mut pos {
                let z: f64 = rng.sample(StandardNormal);
                *v = square.clamp(*v + sd * z);
            }
        }
        out.push(pos);
    }
    out
}

fn ou_path<R: Rng + ?Sized>(times: &[f64], sigma2: f64, phi: f64, rng: &mut R) -> Vec<f64> {
    let sd = sigma2.sqrt();
    let mut out = Vec::with_capacity(times.len());
    let mut w = 0.0;
    for (i, t) in times.iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        w = if i == 0 {
            sd * z
        } else {
            let rho = (-phi * (t - times[i - 1])).exp();
            rho * w + sd * (1.0 - rho * rho).sqrt() * z
        };
        out.push(w);
    }
    out
}

/// Exact draw of the exponential-kernel process at increasing times via
/// `w_{i+1} | w_i ~ N(ρ w_i, σ² (1 - ρ²))`, `ρ = exp(-φ Δt)`.
pub fn gen_ou_process<R: Rng + ?Sized>(times: &[f64], params: &KernelParams, rng: &mut R) -> Vec<f64> {
    ou_path(times, params.sigma2, params.phi, rng)
}

/// A tensor-spline surface `B_S(x, y)ᵀ β_S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub basis: TensorBasisSpec,
    pub coefficients: Vec<f64>,
}

impl Surface {
    pub fn eval(&self, x: f64, y: f64) -> Result<f64> {
        Ok(self.basis.eval_nonzero(x, y)?.iter().map(|(j, v)| v * self.coefficients[*j]).sum())
    }
}

/// Surface with coefficients `β_S ~ N(0, scale · I)`.
pub fn gen_surface<R: Rng + ?Sized>(basis: &TensorBasisSpec, scale: f64, rng: &mut R) -> Result<Surface> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("surface coefficient variance {scale} must be non-negative")));
    }
    let sd = scale.sqrt();
    let coefficients = (0..basis.n_basis()).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Surface { basis: basis.clone(), coefficients })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceConfig {
    pub degree: usize,
    /// Basis functions per axis.
    pub n_basis: usize,
    /// Variance of each coefficient.
    pub scale: f64,
}

fn default_rate() -> f64 {
    5.0
}

fn default_square() -> Square {
    Square { lower: 1.0, upper: 10.0 }
}

fn default_step_variance() -> f64 {
    0.01
}

fn default_resolution() -> f64 {
    1e-3
}

fn default_origin() -> DateTime<FixedOffset> {
    DateTime::parse_from_rfc3339("2020-01-06T07:00:00+00:00").expect("valid literal")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_individuals: usize,
    /// Observations per individual.
    pub n_points: usize,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_square")]
    pub square: Square,
    /// Random-walk variance per axis per unit time.
    #[serde(default = "default_step_variance")]
    pub step_variance: f64,
    pub sigma2: f64,
    pub phi: f64,
    pub tau2: f64,
    /// One per individual, or a single shared value.
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
    #[serde(default)]
    pub surface: Option<SurfaceConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Times are rounded to this grid, matching timestamp precision.
    #[serde(default = "default_resolution")]
    pub time_resolution: f64,
    /// Wall-clock instant of `t = 0`.
    #[serde(default = "default_origin")]
    pub origin: DateTime<FixedOffset>,
}

impl SimConfig {
    /// Single individual with a shared intercept and no surface.
    pub fn new(n_points: usize, intercept: f64, slopes: Vec<f64>, seed: u64) -> Self {
        SimConfig {
            n_individuals: 1,
            n_points,
            rate: default_rate(),
            square: default_square(),
            step_variance: default_step_variance(),
            sigma2: 1.0,
            phi: 1.0,
            tau2: 1.0,
            intercepts: vec![intercept],
            slopes,
            surface: None,
            seed,
            time_resolution: default_resolution(),
            origin: default_origin(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 || self.n_points == 0 {
            return Err(Error::Config("simulation needs at least one individual and one point".into()));
        }
        if !(self.rate > 0.0) || !(self.phi > 0.0) {
            return Err(Error::Config("rate and phi must be positive".into()));
        }
        if !(self.sigma2 >= 0.0 && self.tau2 >= 0.0 && self.step_variance >= 0.0) {
            return Err(Error::Config("variances must be non-negative".into()));
        }
        if !(self.square.upper > self.square.lower) {
            return Err(Error::Config("simulation square is degenerate".into()));
        }
        if !(self.time_resolution >= 0.0) {
            return Err(Error::Config("time resolution must be non-negative".into()));
        }
        if self.intercepts.len() != 1 && self.intercepts.len() != self.n_individuals {
            return Err(Error::Config(format!(
                "expected 1 or {} intercepts, got {}",
                self.n_individuals,
                self.intercepts.len()
            )));
        }
        Ok(())
    }

    pub fn surface_basis(&self) -> Result<Option<TensorBasisSpec>> {
        self.surface
            .as_ref()
            .map(|s| {
                let axis = SplineBasisSpec1D::new(self.square.lower, self.square.upper, s.degree, s.n_basis)?;
                TensorBasisSpec::new(axis.clone(), axis)
            })
            .transpose()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.slopes.len()).map(|j| format!("x{j}")).collect()
    }
}

/// Generating values of one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub config: SimConfig,
    /// Intercept of every individual.
    pub intercepts: Vec<f64>,
    pub surface_coefficients: Option<Vec<f64>>,
    /// Latent process at every observation, per individual.
    #[serde(skip)]
    pub latent: Vec<Vec<f64>>,
}

impl SimTruth {
    pub fn surface(&self) -> Result<Option<Surface>> {
        Ok(self.config.surface_basis()?.zip(self.surface_coefficients.clone()).map(|(basis, coefficients)| {
            Surface { basis, coefficients }
        }))
    }
}

/// Rounds times to `res` and bumps collisions forward so they stay strictly
/// increasing.
fn snap(times: &mut [f64], res: f64) {
    if res <= 0.0 {
        return;
    }
    let mut prev = f64::NEG_INFINITY;
    for t in times.iter_mut() {
        let mut ticks = (*t / res).round();
        if ticks * res <= prev {
            ticks = (prev / res).round() + 1.0;
        }
        *t = ticks * res;
        prev = *t;
    }
}

pub fn gen_dataset(config: &SimConfig) -> Result<(TrajectoryDataset, SimTruth)> {
    config.validate()?;
    let basis = config.surface_basis()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let surface = match (&basis, &config.surface) {
        (Some(b), Some(s)) => Some(gen_surface(b, s.scale, &mut master)?),
        _ => None,
    };
    let intercepts: Vec<f64> = (0..config.n_individuals)
        .map(|k| config.intercepts[if config.intercepts.len() == 1 { 0 } else { k }])
        .collect();
    let noise = Normal::new(0.0, config.tau2.sqrt()).map_err(|e| Error::Config(e.to_string()))?;

    let generated: Vec<(Individual, Vec<f64>)> = (0..config.n_individuals)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(k as u64 + 1);
            let mut times = gen_times(config.n_points, config.rate, &mut rng)?;
            snap(&mut times, config.time_resolution);
            let path = gen_trajectory(&times, &config.square, config.step_variance, &mut rng);
            let w = ou_path(&times, config.sigma2, config.phi, &mut rng);
            let mut observations = Vec::with_capacity(times.len());
            for (i, &t) in times.iter().enumerate() {
                let xs: Vec<f64> = config.slopes.iter().map(|_| rng.sample(StandardNormal)).collect();
                let mut mean = intercepts[k] + xs.iter().zip(&config.slopes).map(|(x, b)| x * b).sum::<f64>();
                if let Some(s) = &surface {
                    mean += s.eval(path[i][0], path[i][1])?;
                }
                let eps = noise.sample(&mut rng);
                let stamp = config.origin + TimeDelta::milliseconds((t * 1000.0).round() as i64);
                observations.push(Observation {
                    t,
                    hour: Some(clock_hour(&stamp)),
                    position: Some(path[i]),
                    covariates: xs.into_iter().map(CovariateValue::Num).collect(),
                    outcome: mean + w[i] + eps,
                });
            }
            Ok((Individual { id: format!("ind{}", k + 1), observations }, w))
        })
        .collect::<Result<_>>()?;

    let (individuals, latent): (Vec<_>, Vec<_>) = generated.into_iter().unzip();
    let dataset = TrajectoryDataset::new(config.covariate_names(), individuals, Some(config.origin))?;
    let truth = SimTruth {
        config: config.clone(),
        intercepts,
        surface_coefficients: surface.map(|s| s.coefficients),
        latent,
    };
    Ok((dataset, truth))
}
