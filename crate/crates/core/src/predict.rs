//! Latent-process recovery, NNGP interpolation, posterior prediction and fit
//! metrics.
//!
//! Prediction uses composition sampling: for every retained draw the latent
//! path at the observed times is drawn from `w | y`, carried to new times by
//! conditioning on the `m` observed neighbours nearest in `|Δt|` (past and
//! future), and measurement noise is added.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{DesignLayout, ModelSpec, Observation, TrajectoryDataset};
use crate::kernel::{Covariance, KernelParams, NoiseParams};
use crate::sampler::{Draw, ModelData, Param, PosteriorChain};
use crate::splines::TensorBasisSpec;
use crate::vecchia::{omega_for, OmegaFactor};
use crate::{Error, Result};

/// Linearly interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior mean and equal-tailed credible interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn summarize(values: &[f64], level: f64) -> Summary {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Summary { mean, lower: quantile(&v, tail), upper: quantile(&v, 1.0 - tail) }
}

/// Posterior summary of one chain quantity over the retained draws.
pub fn summarize_param(chain: &PosteriorChain, p: Param, level: f64) -> Summary {
    summarize(&chain.values(p), level)
}

/// Draws `w ~ N(Ω⁻¹ r / τ², Ω⁻¹)`, the latent path given the residual
/// `r = y - X* ψ`.
pub fn recover_w<R: Rng + ?Sized>(r: &[f64], omega: &OmegaFactor, rng: &mut R) -> Result<Vec<f64>> {
    if r.len() != omega.len() {
        return Err(Error::Dimension { expected: omega.len(), got: r.len() });
    }
    let t2 = omega.tau2();
    let mut mean = omega.solve(r);
    mean.iter_mut().for_each(|v| *v /= t2);
    let mut z: Vec<f64> = (0..r.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    omega.cholesky().backward_in_place(&mut z);
    Ok(mean.iter().zip(&z).map(|(a, b)| a + b).collect())
}

/// Conditional mean weights and variance of `w(t₀)` given its neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingWeights {
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub variance: f64,
}

impl KrigingWeights {
    pub fn mean(&self, w: &[f64]) -> f64 {
        self.neighbors.iter().zip(&self.weights).map(|(&i, a)| a * w[i]).sum()
    }
}

/// Indices of the `m` sorted `times` closest to `t0`.
fn nearest(times: &[f64], t0: f64, m: usize) -> Vec<usize> {
    let split = times.partition_point(|t| *t < t0);
    let (mut lo, mut hi) = (split, split);
    let mut out = Vec::with_capacity(m);
    while out.len() < m && (lo > 0 || hi < times.len()) {
        let take_left = match (lo > 0, hi < times.len()) {
            (true, true) => t0 - times[lo - 1] <= times[hi] - t0,
            (l, _) => l,
        };
        if take_left {
            lo -= 1;
            out.push(lo);
        } else {
            out.push(hi);
            hi += 1;
        }
    }
    out.sort_unstable();
    out
}

pub fn kriging_weights<K: Covariance + ?Sized>(times: &[f64], t0: f64, kernel: &K, m: usize) -> Result<KrigingWeights> {
    if times.is_empty() {
        return Err(Error::Data("cannot interpolate without observed times".into()));
    }
    if !t0.is_finite() {
        return Err(Error::Domain(format!("prediction time {t0} is not finite")));
    }
    if m == 0 {
        return Err(Error::Config("neighbour budget m must be at least 1".into()));
    }
    let hit = times.partition_point(|t| *t < t0);
    if hit < times.len() && times[hit] == t0 {
        return Ok(KrigingWeights { neighbors: vec![hit], weights: vec![1.0], variance: 0.0 });
    }
    let nb = nearest(times, t0, m);
    let q = nb.len();
    let c = DMatrix::from_fn(q, q, |a, b| kernel.cov((times[nb[a]] - times[nb[b]]).abs()));
    let c0 = DVector::from_fn(q, |a, _| kernel.cov((times[nb[a]] - t0).abs()));
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("singular neighbour covariance when interpolating at {t0}")))?;
    let a = chol.solve(&c0);
    let variance = (kernel.sill() - c0.dot(&a)).max(0.0);
    Ok(KrigingWeights { neighbors: nb, weights: a.as_slice().to_vec(), variance })
}

/// Draws `w(t₀) | w_N` from the nearest-neighbour conditional.
pub fn interpolate_w<R: Rng + ?Sized>(
    w: &[f64],
    times: &[f64],
    t0: f64,
    kernel: &KernelParams,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    if w.len() != times.len() {
        return Err(Error::Dimension { expected: times.len(), got: w.len() });
    }
    let kw = kriging_weights(times, t0, kernel, m)?;
    let z: f64 = rng.sample(StandardNormal);
    Ok(kw.mean(w) + kw.variance.sqrt() * z)
}

/// Points to predict for one individual.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    pub individual: String,
    /// Time, hour, position and covariates are used; outcomes are ignored.
    pub points: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedPoint {
    pub t: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub individual: String,
    pub points: Vec<PredictedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub level: f64,
    /// Use every `thin`-th retained draw.
    pub thin: usize,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { level: 0.95, thin: 1, seed: 0 }
    }
}

fn same_params(a: &Draw, b: &Draw) -> bool {
    a.sigma2 == b.sigma2 && a.phi == b.phi && a.tau2 == b.tau2
}

fn predict_one(
    draws: &[&Draw],
    k: usize,
    dataset: &TrajectoryDataset,
    layout: &DesignLayout,
    m: usize,
    req: &PredictionRequest,
    config: &PredictConfig,
) -> Result<PredictionResult> {
    let ind = &dataset.individuals[k];
    let p = layout.width();
    let times = ind.times();
    let y = ind.outcomes();
    let x_obs = layout.rows(k, &ind.observations)?;
    let x_new = layout.rows(k, &req.points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(k as u64);

    let mut samples = vec![Vec::with_capacity(draws.len()); req.points.len()];
    let mut omega: Option<OmegaFactor> = None;
    let mut weights: Vec<KrigingWeights> = Vec::new();
    let mut prev: Option<&Draw> = None;
    for &d in draws {
        let kernel = KernelParams::new(d.sigma2, d.phi)?;
        let fresh = !prev.is_some_and(|q| same_params(q, d));
        if fresh {
            weights.clear();
            if !times.is_empty() {
                omega = Some(omega_for(&times, m, &kernel, &NoiseParams::new(d.tau2)?)?);
                for pt in &req.points {
                    weights.push(kriging_weights(&times, pt.t, &kernel, m)?);
                }
            }
        }
        prev = Some(d);
        let fitted = |row: &[f64]| row.iter().zip(&d.psi).map(|(a, b)| a * b).sum::<f64>();
        let w = match &omega {
            Some(om) if !times.is_empty() => {
                let r: Vec<f64> = if p == 0 {
                    y.clone()
                } else {
                    x_obs.chunks_exact(p).zip(&y).map(|(row, yi)| yi - fitted(row)).collect()
                };
                recover_w(&r, om, &mut rng)?
            }
            _ => Vec::new(),
        };
        let tau = d.tau2.sqrt();
        for (j, out) in samples.iter_mut().enumerate() {
            let mu = if p == 0 { 0.0 } else { fitted(&x_new[j * p..(j + 1) * p]) };
            let latent = if w.is_empty() {
                d.sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal)
            } else {
                let kw = &weights[j];
                kw.mean(&w) + kw.variance.sqrt() * rng.sample::<f64, _>(StandardNormal)
            };
            let noise = tau * rng.sample::<f64, _>(StandardNormal);
            out.push(mu + latent + noise);
        }
    }
    let points = req
        .points
        .iter()
        .zip(&samples)
        .map(|(pt, s)| {
            let sm = summarize(s, config.level);
            PredictedPoint { t: pt.t, mean: sm.mean, lower: sm.lower, upper: sm.upper }
        })
        .collect();
    Ok(PredictionResult { individual: req.individual.clone(), points })
}

/// Posterior predictive summaries at the requested points.
///
/// Draws with identical `(σ², φ, τ²)` (rejected proposals) share their `Ω`
/// factor and kriging weights.
pub fn predict(
    chain: &PosteriorChain,
    requests: &[PredictionRequest],
    dataset: &TrajectoryDataset,
    spec: &ModelSpec,
    config: &PredictConfig,
) -> Result<Vec<PredictionResult>> {
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::Config(format!("credible level {} outside (0, 1)", config.level)));
    }
    let draws: Vec<&Draw> = chain.retained().iter().step_by(config.thin.max(1)).collect();
    if draws.is_empty() {
        return Err(Error::Data("chain has no retained draws".into()));
    }
    let layout = DesignLayout::new(dataset, spec)?;
    if layout.width() != draws[0].psi.len() {
        return Err(Error::Dimension { expected: layout.width(), got: draws[0].psi.len() });
    }
    requests
        .par_iter()
        .map(|req| {
            let k = dataset
                .individual_index(&req.individual)
                .ok_or_else(|| Error::Data(format!("unknown individual {}", req.individual)))?;
            predict_one(&draws, k, dataset, &layout, spec.neighbors, req, config)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub coverage: f64,
    pub rmspe: f64,
    /// RMSPE relative to predicting every point by the training mean.
    pub rel_rmspe: f64,
    pub piw: f64,
}

pub fn metrics(predicted: &[PredictedPoint], truth: &[f64], train_mean: f64) -> Result<Metrics> {
    if predicted.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Dimension { expected: predicted.len(), got: truth.len() });
    }
    let n = truth.len() as f64;
    let mut se = 0.0;
    let mut se0 = 0.0;
    let mut covered = 0usize;
    let mut width = 0.0;
    for (p, y) in predicted.iter().zip(truth) {
        se += (p.mean - y).powi(2);
        se0 += (train_mean - y).powi(2);
        if p.lower <= *y && *y <= p.upper {
            covered += 1;
        }
        width += p.upper - p.lower;
    }
    let rmspe = (se / n).sqrt();
    Ok(Metrics {
        coverage: covered as f64 / n,
        rmspe,
        rel_rmspe: rmspe / (se0 / n).sqrt(),
        piw: width / n,
    })
}

/// Deviance information criterion `2 D̄ - D(θ̄)` with the collapsed deviance
/// `D = -2 log N(y | X* ψ, C̃ + τ² I)`.
pub fn dic(chain: &PosteriorChain, data: &ModelData) -> Result<f64> {
    let draws = chain.retained();
    if draws.is_empty() {
        return Err(Error::Data("chain has no retained draws".into()));
    }
    let deviance = |d: &Draw| -> Result<f64> {
        if d.loglik.is_finite() {
            return Ok(-2.0 * d.loglik);
        }
        let ll = data.loglik(&d.psi, &KernelParams::new(d.sigma2, d.phi)?, &NoiseParams::new(d.tau2)?)?;
        Ok(-2.0 * ll)
    };
    let devs: Vec<f64> = draws.iter().map(deviance).collect::<Result<_>>()?;
    let mean_dev = devs.iter().sum::<f64>() / devs.len() as f64;
    let n = draws.len() as f64;
    let p = draws[0].psi.len();
    let mut psi = vec![0.0; p];
    for d in draws {
        for (a, b) in psi.iter_mut().zip(&d.psi) {
            *a += b / n;
        }
    }
    let mean_of = |f: fn(&Draw) -> f64| draws.iter().map(f).sum::<f64>() / n;
    let kernel = KernelParams::new(mean_of(|d| d.sigma2), mean_of(|d| d.phi))?;
    let noise = NoiseParams::new(mean_of(|d| d.tau2))?;
    let at_mean = -2.0 * data.loglik(&psi, &kernel, &noise)?;
    Ok(2.0 * mean_dev - at_mean)
}

/// Posterior summaries of the spatial surface `B_S(x, y)ᵀ β_S` at `points`.
///
/// `offset` is the first spatial column of `ψ`.
pub fn spatial_surface(
    chain: &PosteriorChain,
    basis: &TensorBasisSpec,
    offset: usize,
    points: &[[f64; 2]],
    level: f64,
) -> Result<Vec<Summary>> {
    let draws = chain.retained();
    if draws.is_empty() {
        return Err(Error::Data("chain has no retained draws".into()));
    }
    let js = basis.n_basis();
    if draws[0].psi.len() < offset + js {
        return Err(Error::Dimension { expected: offset + js, got: draws[0].psi.len() });
    }
    points
        .par_iter()
        .map(|&[x, y]| {
            let b = basis.eval_nonzero(x, y)?;
            let vals: Vec<f64> = draws
                .iter()
                .map(|d| b.iter().map(|(j, v)| v * d.psi[offset + j]).sum())
                .collect();
            Ok(summarize(&vals, level))
        })
        .collect()
}

/// `n × n` grid over the rectangle of a tensor basis, row by row in `y`.
pub fn surface_grid(basis: &TensorBasisSpec, n: usize) -> Vec<[f64; 2]> {
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        if n == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        }
    };
    let xs = axis(basis.x.lower, basis.x.upper);
    let ys = axis(basis.y.lower, basis.y.upper);
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::cov_matrix;
    use rand::Rng;

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.125), 1.5);
        assert!(quantile(&[], 0.5).is_nan());
        let s = summarize(&[2.0], 0.95);
        assert_eq!((s.mean, s.lower, s.upper), (2.0, 2.0, 2.0));
    }

    #[test]
    fn nearest_neighbours_both_sides() {
        let t = [0.0, 1.0, 2.0, 3.0, 10.0];
        assert_eq!(nearest(&t, 2.4, 2), vec![2, 3]);
        assert_eq!(nearest(&t, 9.0, 2), vec![3, 4]);
        assert_eq!(nearest(&t, -5.0, 3), vec![0, 1, 2]);
        assert_eq!(nearest(&t, 50.0, 10), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn exact_time_match_is_deterministic() {
        let p = KernelParams::new(1.0, 1.0).unwrap();
        let times = [0.0, 0.3, 0.9];
        let w = [0.2, -1.0, 0.7];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (i, t) in times.iter().enumerate() {
            let kw = kriging_weights(&times, *t, &p, 2).unwrap();
            assert_eq!(kw.variance, 0.0);
            assert_eq!(interpolate_w(&w, &times, *t, &p, 2, &mut rng).unwrap(), w[i]);
        }
        assert!(kriging_weights(&[], 0.0, &p, 2).is_err());
    }

    #[test]
    fn far_point_decorrelates() {
        let p = KernelParams::new(2.0, 1.0).unwrap();
        let kw = kriging_weights(&[0.0, 1.0], 500.0, &p, 2).unwrap();
        assert!(kw.mean(&[3.0, 3.0]).abs() < 1e-100);
        assert!((kw.variance - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kriging_matches_dense_formula() {
        let p = KernelParams::new(1.3, 0.7).unwrap();
        let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..50).map(|_| rng.sample(StandardNormal)).collect();
        let c = cov_matrix(&times, &p);
        let cinv = c.clone().cholesky().unwrap().inverse();
        for t0 in [-1.0, 3.3, 7.77, 19.9, 25.0] {
            let c0 = DVector::from_fn(50, |i, _| 1.3 * (-0.7 * (times[i] - t0).abs()).exp());
            let mean = (c0.transpose() * &cinv * DVector::from_column_slice(&w))[0];
            let var = 1.3 - (c0.transpose() * &cinv * &c0)[0];
            let kw = kriging_weights(&times, t0, &p, 49).unwrap();
            // 49 of 50 points; the dropped one is screened by the Markov property
            assert!((kw.mean(&w) - mean).abs() < 1e-8, "{t0}");
            assert!((kw.variance - var).abs() < 1e-8);
        }
    }

    #[test]
    fn metrics_basic() {
        let pts: Vec<PredictedPoint> =
            [1.0, 2.0, 3.0].iter().map(|&y| PredictedPoint { t: 0.0, mean: y, lower: y - 1.0, upper: y + 1.0 }).collect();
        let m = metrics(&pts, &[1.0, 2.0, 3.0], 2.0).unwrap();
        assert_eq!((m.rmspe, m.coverage, m.piw), (0.0, 1.0, 2.0));
        assert_eq!(m.rel_rmspe, 0.0);
        let wide: Vec<PredictedPoint> = pts
            .iter()
            .map(|p| PredictedPoint { lower: f64::NEG_INFINITY, upper: f64::INFINITY, mean: 0.0, ..*p })
            .collect();
        assert_eq!(metrics(&wide, &[1.0, 2.0, 3.0], 2.0).unwrap().coverage, 1.0);
        assert!(metrics(&[], &[], 0.0).is_err());
    }

    #[test]
    fn grid_layout() {
        let axis = crate::splines::SplineBasisSpec1D::new(1.0, 10.0, 2, 9).unwrap();
        let basis = TensorBasisSpec::new(axis.clone(), axis).unwrap();
        let g = surface_grid(&basis, 50);
        assert_eq!(g.len(), 2500);
        assert_eq!(g[0], [1.0, 1.0]);
        assert_eq!(g[49], [10.0, 1.0]);
        assert_eq!(g[2499], [10.0, 10.0]);
    }
}
