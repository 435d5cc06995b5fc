//! Collapsed Metropolis-within-Gibbs sampler.
//!
//! Each iteration runs, in order: a joint adaptive random-walk Metropolis step
//! on `η = (log σ², log φ, log τ²)` against the collapsed likelihood, a Gibbs
//! draw of all mean coefficients `ψ`, and a Gibbs draw of the spline shrinkage
//! precision `λ` when a spatial spline is configured.
//!
//! The `ψ` full conditional needs `X*ᵀ Λ̃⁻¹ X*`, which costs `p*` banded solves.
//! It only changes when `(θ, τ²)` moves, so it is cached and recomputed on
//! accepted proposals only.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{assemble_design, DesignMatrix, GammaPrior, ModelSpec, Priors, TrajectoryDataset};
use crate::kernel::{KernelParams, NoiseParams};
use crate::splines::PenaltyMatrix;
use crate::vecchia::{build_factors, build_neighbor_index, build_omega, NeighborIndex, OmegaFactor};
use crate::{Error, Result};

/// Full-conditional rule for `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaUpdate {
    /// `Gamma(α + 1/2, β + β_Sᵀ P β_S)`.
    #[default]
    Paper,
    /// `Gamma(α + rank(P)/2, β + β_Sᵀ P β_S / 2)`.
    Conjugate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub enabled: bool,
    /// Number of recorded states before the empirical covariance is used.
    pub start: usize,
    /// Probability of drawing from the fixed initial proposal instead of the
    /// adaptive one.
    pub mixture_weight: f64,
    /// Multiplier of the empirical covariance; `2.38² / 3` when absent.
    pub scale: Option<f64>,
    /// Ridge added to the adaptive covariance.
    pub epsilon: f64,
    /// Stop updating the empirical covariance once burn-in ends.
    pub freeze_after_burnin: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            enabled: true,
            start: 500,
            mixture_weight: 0.05,
            scale: None,
            epsilon: 1e-6,
            freeze_after_burnin: false,
        }
    }
}

/// Starting values; anything left empty is derived from the data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialValues {
    pub psi: Option<Vec<f64>>,
    pub sigma2: Option<f64>,
    pub phi: Option<f64>,
    pub tau2: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub n_burnin: usize,
    pub seed: u64,
    pub adaptation: AdaptationConfig,
    pub initial: InitialValues,
    /// Initial proposal standard deviations on the log scale; `3 / √n` each
    /// when absent.
    pub proposal_sd: Option<[f64; 3]>,
    pub lambda_update: LambdaUpdate,
    /// Reuse `Ω` factors and `X*ᵀ Λ̃⁻¹ X*` across rejected proposals.
    pub cache: bool,
    pub update_psi: bool,
    pub update_lambda: bool,
    /// When false the data are ignored and the chain targets the prior.
    pub likelihood: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_iter: 10_000,
            n_burnin: 5_000,
            seed: 0,
            adaptation: AdaptationConfig::default(),
            initial: InitialValues::default(),
            proposal_sd: None,
            lambda_update: LambdaUpdate::Paper,
            cache: true,
            update_psi: true,
            update_lambda: true,
            likelihood: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burnin >= self.n_iter && !(self.n_iter == 0 && self.n_burnin == 0) {
            return Err(Error::Config(format!(
                "burn-in ({}) must be shorter than the chain ({})",
                self.n_burnin, self.n_iter
            )));
        }
        let a = &self.adaptation;
        if !(a.mixture_weight > 0.0 && a.mixture_weight < 1.0) {
            return Err(Error::Config("adaptation mixture weight must lie in (0, 1)".into()));
        }
        if !(a.epsilon > 0.0) {
            return Err(Error::Config("adaptation epsilon must be positive".into()));
        }
        if let Some(s) = a.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config("adaptation scale must be positive".into()));
            }
        }
        if let Some(sd) = self.proposal_sd {
            if sd.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(Error::Config("proposal standard deviations must be positive".into()));
            }
        }
        let init = &self.initial;
        for v in [init.sigma2, init.phi, init.tau2, init.lambda].into_iter().flatten() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("initial variance parameter {v} is not positive")));
            }
        }
        Ok(())
    }
}

/// One stored iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub iteration: usize,
    pub accepted: bool,
    pub sigma2: f64,
    pub phi: f64,
    pub tau2: f64,
    pub lambda: Option<f64>,
    pub psi: Vec<f64>,
    /// Collapsed log-likelihood at this draw; NaN when unknown (e.g. read
    /// back from a chain file).
    pub loglik: f64,
}

/// Scalar quantity tracked by the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Psi(usize),
    Sigma2,
    Phi,
    Tau2,
    Lambda,
}

impl Draw {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Psi(j) => self.psi[j],
            Param::Sigma2 => self.sigma2,
            Param::Phi => self.phi,
            Param::Tau2 => self.tau2,
            Param::Lambda => self.lambda.unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChain {
    /// Names of the `ψ` entries.
    pub names: Vec<String>,
    pub n_burnin: usize,
    pub draws: Vec<Draw>,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Draws after burn-in.
    pub fn retained(&self) -> &[Draw] {
        &self.draws[self.n_burnin.min(self.draws.len())..]
    }

    /// Retained values of one quantity.
    pub fn values(&self, p: Param) -> Vec<f64> {
        self.retained().iter().map(|d| d.get(p)).collect()
    }

    pub fn psi_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Acceptance rate of the Metropolis step over `range` of iterations.
    pub fn acceptance_rate(&self, range: Range<usize>) -> f64 {
        let d = &self.draws[range.start.min(self.len())..range.end.min(self.len())];
        if d.is_empty() {
            return f64::NAN;
        }
        d.iter().filter(|d| d.accepted).count() as f64 / d.len() as f64
    }

    /// Acceptance rate after burn-in.
    pub fn retained_acceptance_rate(&self) -> f64 {
        self.acceptance_rate(self.n_burnin..self.len())
    }

    /// Running acceptance rate after each iteration.
    pub fn running_acceptance(&self) -> Vec<f64> {
        let mut acc = 0usize;
        self.draws
            .iter()
            .enumerate()
            .map(|(i, d)| {
                acc += d.accepted as usize;
                acc as f64 / (i + 1) as f64
            })
            .collect()
    }
}

/// Gaussian prior of `ψ`: independent `N(μ, v)` on unpenalised columns and
/// `N(0, (λ P)⁻)` on the spatial spline block.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiPrior {
    pub mean: DVector<f64>,
    /// Prior precision of unpenalised columns, zero on penalised ones.
    pub base_precision: DVector<f64>,
    /// Column offset of the penalised block and its penalty.
    pub penalty: Option<(usize, PenaltyMatrix)>,
}

impl PsiPrior {
    pub fn new(design: &DesignMatrix, spec: &ModelSpec) -> Self {
        let p = design.n_cols;
        let spatial = design.groups.spatial.clone();
        let in_penalty = |j: usize| spec.spatial_spline.is_some() && spatial.contains(&j);
        let mean = DVector::from_fn(p, |j, _| if in_penalty(j) { 0.0 } else { spec.priors.beta_mean });
        let base_precision =
            DVector::from_fn(p, |j, _| if in_penalty(j) { 0.0 } else { 1.0 / spec.priors.beta_variance });
        let penalty = spec.spatial_spline.as_ref().map(|s| (spatial.start, s.penalty_matrix()));
        PsiPrior { mean, base_precision, penalty }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `V_ψ⁻¹ = blockdiag(V_β⁻¹, λ P)`.
    pub fn precision(&self, lambda: f64) -> DMatrix<f64> {
        let mut v = DMatrix::from_diagonal(&self.base_precision);
        if let Some((off, pen)) = &self.penalty {
            let j = pen.matrix.nrows();
            let mut block = v.view_mut((*off, *off), (j, j));
            block += &pen.matrix * lambda;
        }
        v
    }

    /// `V_ψ⁻¹ μ`; the penalised block has zero prior mean.
    pub fn precision_mean(&self) -> DVector<f64> {
        self.base_precision.component_mul(&self.mean)
    }

    /// The penalised coefficients of `ψ`.
    pub fn penalized<'a>(&self, psi: &'a [f64]) -> Option<&'a [f64]> {
        self.penalty.as_ref().map(|(off, pen)| &psi[*off..*off + pen.matrix.nrows()])
    }
}

/// `X*ᵀ Λ̃⁻¹ X*` and `X*ᵀ Λ̃⁻¹ y` of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTerms {
    pub precision: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl DataTerms {
    pub fn zeros(p: usize) -> Self {
        DataTerms { precision: DMatrix::zeros(p, p), rhs: DVector::zeros(p) }
    }

    fn add(&mut self, other: &DataTerms) {
        self.precision += &other.precision;
        self.rhs += &other.rhs;
    }
}

/// Row-major `Xᵀ M` for sparse-ish `X` (`n × p`) and `M` (`n × q`).
fn xt_mul(x: &[f64], p: usize, m: &[f64], q: usize, out: &mut [f64]) {
    for (xr, mr) in x.chunks_exact(p).zip(m.chunks_exact(q)) {
        for (j, &xij) in xr.iter().enumerate() {
            if xij != 0.0 {
                for (o, v) in out[j * q..(j + 1) * q].iter_mut().zip(mr) {
                    *o += xij * v;
                }
            }
        }
    }
}

fn gram(x: &[f64], p: usize, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    xt_mul(x, p, x, p, &mut xtx);
    xt_mul(x, p, y, 1, &mut xty);
    (xtx, xty)
}

fn gls_from_parts(x: &[f64], p: usize, y: &[f64], xtx: &[f64], xty: &[f64], omega: &OmegaFactor) -> DataTerms {
    let t2 = omega.tau2();
    let t4 = t2 * t2;
    let u = omega.solve_rows(x, p);
    let vy = omega.solve(y);
    let mut xtu = vec![0.0; p * p];
    let mut xtv = vec![0.0; p];
    xt_mul(x, p, &u, p, &mut xtu);
    xt_mul(x, p, &vy, 1, &mut xtv);
    let precision = DMatrix::from_fn(p, p, |i, j| {
        let a = xtx[i * p + j] / t2 - xtu[i * p + j] / t4;
        let b = xtx[j * p + i] / t2 - xtu[j * p + i] / t4;
        0.5 * (a + b)
    });
    let rhs = DVector::from_fn(p, |i, _| xty[i] / t2 - xtv[i] / t4);
    DataTerms { precision, rhs }
}

/// `X*ᵀ Λ̃⁻¹ X*` and `X*ᵀ Λ̃⁻¹ y` for one individual, using
/// `X*ᵀ Λ̃⁻¹ M = X*ᵀ M / τ² - (Ω⁻¹ X*)ᵀ M / τ⁴`.
pub fn gls_terms(x: &[f64], p: usize, y: &[f64], omega: &OmegaFactor) -> Result<DataTerms> {
    if y.len() != omega.len() || x.len() != y.len() * p {
        return Err(Error::Dimension { expected: omega.len() * p, got: x.len() });
    }
    let (xtx, xty) = gram(x, p, y);
    Ok(gls_from_parts(x, p, y, &xtx, &xty, omega))
}

/// Draws `ψ ~ N(G⁻¹ g, G⁻¹)` with `G = X*ᵀ Λ̃⁻¹ X* + V_ψ⁻¹` and
/// `g = X*ᵀ Λ̃⁻¹ y + V_ψ⁻¹ μ`.
pub fn gibbs_psi<R: Rng + ?Sized>(
    data: &DataTerms,
    prior: &PsiPrior,
    lambda: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let p = prior.dim();
    let g_mat = &data.precision + prior.precision(lambda);
    let g_vec = &data.rhs + prior.precision_mean();
    let chol = g_mat.clone().cholesky().ok_or_else(|| {
        let diag = g_mat.diagonal();
        Error::Numerical(format!(
            "psi precision is not positive definite (diagonal range {:e} to {:e}, p = {p})",
            diag.min(),
            diag.max()
        ))
    })?;
    let mean = chol.solve(&g_vec);
    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let lt = chol.l().transpose();
    let dev = lt
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("singular psi Cholesky factor".into()))?;
    Ok(mean + dev)
}

/// Shape and rate of the `λ` full conditional given `h = β_Sᵀ P β_S`.
pub fn lambda_posterior(h: f64, rank: usize, prior: &GammaPrior, rule: LambdaUpdate) -> (f64, f64) {
    match rule {
        LambdaUpdate::Paper => (prior.shape + 0.5, prior.rate + h),
        LambdaUpdate::Conjugate => (prior.shape + 0.5 * rank as f64, prior.rate + 0.5 * h),
    }
}

pub fn gibbs_lambda<R: Rng + ?Sized>(
    beta_s: &[f64],
    penalty: &PenaltyMatrix,
    prior: &GammaPrior,
    rule: LambdaUpdate,
    rng: &mut R,
) -> Result<f64> {
    let mut h = penalty.quadratic_form(beta_s);
    let scale: f64 = 1.0 + beta_s.iter().map(|b| b * b).sum::<f64>();
    if h < -1e-9 * scale || !h.is_finite() {
        return Err(Error::Numerical(format!("negative penalty quadratic form {h:e}")));
    }
    h = h.max(0.0);
    let (shape, rate) = lambda_posterior(h, penalty.rank, prior, rule);
    let dist = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numerical(format!("invalid lambda conditional ({shape}, {rate}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Log prior of `η = (log σ², log φ, log τ²)` including the Jacobian, up to a
/// constant.
pub fn log_prior_eta(eta: [f64; 3], priors: &Priors) -> f64 {
    let [s, f, t] = eta;
    priors.sigma2.ln_kernel(s.exp()) + s + priors.phi.ln_kernel(f.exp()) + f + priors.tau2.ln_kernel(t.exp()) + t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhOutcome {
    pub state: [f64; 3],
    pub log_post: f64,
    pub accepted: bool,
}

/// Adaptive random-walk Metropolis on a 3-vector.
///
/// Once `start` states have been recorded the proposal is the mixture
/// `w N(0, Σ₀) + (1 - w) N(0, s Σ̂ + ε I)` with `Σ̂` the running covariance
/// of the chain and `Σ₀` the fixed diagonal initial proposal.
#[derive(Debug, Clone)]
pub struct AdaptiveMetropolis {
    config: AdaptationConfig,
    initial_sd: [f64; 3],
    scale: f64,
    count: usize,
    mean: Vector3<f64>,
    m2: Matrix3<f64>,
    frozen: bool,
}

impl AdaptiveMetropolis {
    pub fn new(initial_sd: [f64; 3], config: AdaptationConfig) -> Self {
        let scale = config.scale.unwrap_or(2.38 * 2.38 / 3.0);
        AdaptiveMetropolis {
            config,
            initial_sd,
            scale,
            count: 0,
            mean: Vector3::zeros(),
            m2: Matrix3::zeros(),
            frozen: false,
        }
    }

    /// Adds a chain state to the running covariance.
    pub fn record(&mut self, state: [f64; 3]) {
        if self.frozen {
            return;
        }
        let x = Vector3::from(state);
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean).transpose();
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Empirical covariance of the recorded states.
    pub fn covariance(&self) -> Option<Matrix3<f64>> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    pub fn is_adaptive(&self) -> bool {
        self.config.enabled && self.count >= self.config.start.max(2)
    }

    pub fn propose<R: Rng + ?Sized>(&self, current: [f64; 3], rng: &mut R) -> [f64; 3] {
        let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let mut step = Vector3::from(self.initial_sd).component_mul(&z);
        if self.is_adaptive() {
            let u: f64 = rng.random();
            if u >= self.config.mixture_weight {
                let cov = self.covariance().unwrap() * self.scale + Matrix3::identity() * self.config.epsilon;
                if let Some(ch) = cov.cholesky() {
                    step = ch.l() * z;
                }
            }
        }
        [current[0] + step[0], current[1] + step[1], current[2] + step[2]]
    }

    /// One Metropolis step. The resulting state is recorded for adaptation.
    pub fn step<R, F>(&mut self, current: [f64; 3], current_lp: f64, mut log_post: F, rng: &mut R) -> MhOutcome
    where
        R: Rng + ?Sized,
        F: FnMut([f64; 3]) -> f64,
    {
        let proposal = self.propose(current, rng);
        let lp = log_post(proposal);
        let u: f64 = rng.random();
        let accepted = lp.is_finite() && u.ln() < lp - current_lp;
        let out = if accepted {
            MhOutcome { state: proposal, log_post: lp, accepted }
        } else {
            MhOutcome { state: current, log_post: current_lp, accepted }
        };
        self.record(out.state);
        out
    }
}

/// Natural-scale parameters of `η`, or `None` when they overflow.
fn eta_params(eta: [f64; 3]) -> Option<(KernelParams, NoiseParams)> {
    let k = KernelParams::new(eta[0].exp(), eta[1].exp()).ok()?;
    let n = NoiseParams::new(eta[2].exp()).ok()?;
    Some((k, n))
}

struct Block {
    rows: Range<usize>,
    times: Vec<f64>,
    y: Vec<f64>,
    idx: NeighborIndex,
    xtx: Vec<f64>,
    xty: Vec<f64>,
}

/// Design and outcomes laid out per individual for likelihood evaluation.
pub struct ModelData {
    design: DesignMatrix,
    blocks: Vec<Block>,
    m: usize,
}

impl ModelData {
    pub fn new(dataset: &TrajectoryDataset, spec: &ModelSpec) -> Result<Self> {
        dataset.validate()?;
        let design = assemble_design(dataset, spec)?;
        let p = design.n_cols;
        let mut blocks = Vec::new();
        for (k, ind) in dataset.individuals.iter().enumerate() {
            if ind.is_empty() {
                continue;
            }
            let rows = design.offsets[k]..design.offsets[k + 1];
            let y = ind.outcomes();
            let (xtx, xty) = gram(design.block(k), p, &y);
            blocks.push(Block {
                rows,
                times: ind.times(),
                y,
                idx: build_neighbor_index(ind.len(), spec.neighbors)?,
                xtx,
                xty,
            });
        }
        Ok(ModelData { design, blocks, m: spec.neighbors })
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn n_obs(&self) -> usize {
        self.design.n_rows
    }

    pub fn width(&self) -> usize {
        self.design.n_cols
    }

    pub fn neighbors(&self) -> usize {
        self.m
    }

    fn x(&self, b: &Block) -> &[f64] {
        let p = self.design.n_cols;
        &self.design.data[b.rows.start * p..b.rows.end * p]
    }

    fn residual(&self, b: &Block, psi: &[f64]) -> Vec<f64> {
        let p = self.design.n_cols;
        self.x(b)
            .chunks_exact(p.max(1))
            .zip(&b.y)
            .map(|(row, y)| if p == 0 { *y } else { y - row.iter().zip(psi).map(|(a, c)| a * c).sum::<f64>() })
            .collect()
    }

    pub fn omegas(&self, kernel: &KernelParams, noise: &NoiseParams) -> Result<Vec<OmegaFactor>> {
        self.blocks
            .par_iter()
            .map(|b| build_omega(&build_factors(&b.times, kernel, &b.idx)?, noise))
            .collect()
    }

    /// Collapsed log-likelihood for given `Ω` factors and coefficients.
    pub fn loglik_with(&self, omegas: &[OmegaFactor], psi: &[f64]) -> f64 {
        let parts: Vec<(f64, f64)> = self
            .blocks
            .par_iter()
            .zip(omegas.par_iter())
            .map(|(b, om)| block_loglik(&self.residual(b, psi), om))
            .collect();
        finish_loglik(self.n_obs(), &parts)
    }

    /// Collapsed log-likelihood at explicit parameter values.
    pub fn loglik(&self, psi: &[f64], kernel: &KernelParams, noise: &NoiseParams) -> Result<f64> {
        if psi.len() != self.width() {
            return Err(Error::Dimension { expected: self.width(), got: psi.len() });
        }
        let omegas = self.omegas(kernel, noise)?;
        Ok(self.loglik_with(&omegas, psi))
    }

    /// Builds `Ω` and evaluates the likelihood in one pass per individual.
    fn propose_loglik(&self, psi: &[f64], kernel: &KernelParams, noise: &NoiseParams) -> Result<(f64, Vec<OmegaFactor>)> {
        let parts: Vec<(OmegaFactor, (f64, f64))> = self
            .blocks
            .par_iter()
            .map(|b| {
                let om = build_omega(&build_factors(&b.times, kernel, &b.idx)?, noise)?;
                let t = block_loglik(&self.residual(b, psi), &om);
                Ok((om, t))
            })
            .collect::<Result<_>>()?;
        let terms: Vec<(f64, f64)> = parts.iter().map(|p| p.1).collect();
        let ll = finish_loglik(self.n_obs(), &terms);
        Ok((ll, parts.into_iter().map(|p| p.0).collect()))
    }

    pub fn data_terms(&self, omegas: &[OmegaFactor]) -> DataTerms {
        let p = self.width();
        let parts: Vec<DataTerms> = self
            .blocks
            .par_iter()
            .zip(omegas.par_iter())
            .map(|(b, om)| gls_from_parts(self.x(b), p, &b.y, &b.xtx, &b.xty, om))
            .collect();
        let mut total = DataTerms::zeros(p);
        for t in &parts {
            total.add(t);
        }
        total
    }

    /// Unweighted `(XᵀX, Xᵀy)` summed over individuals.
    pub fn gram(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.width();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        for b in &self.blocks {
            xtx += DMatrix::from_row_slice(p, p, &b.xtx);
            xty += DVector::from_column_slice(&b.xty);
        }
        (xtx, xty)
    }

    fn mean_gap(&self) -> Option<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for b in &self.blocks {
            if b.times.len() >= 2 {
                total += b.times[b.times.len() - 1] - b.times[0];
                count += b.times.len() - 1;
            }
        }
        (count > 0).then(|| total / count as f64)
    }
}

/// `(rᵀΛ̃⁻¹r, log det Λ̃)` of one individual.
fn block_loglik(r: &[f64], om: &OmegaFactor) -> (f64, f64) {
    let t2 = om.tau2();
    let v = om.solve(r);
    let rr: f64 = r.iter().map(|x| x * x).sum();
    let rv: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
    (rr / t2 - rv / (t2 * t2), om.log_det_lambda())
}

fn finish_loglik(n: usize, parts: &[(f64, f64)]) -> f64 {
    let mut q = 0.0;
    let mut ld = 0.0;
    for (a, b) in parts {
        q += a;
        ld += b;
    }
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + ld + q)
}

/// Stateful collapsed sampler; [`CollapsedSampler::step`] runs one iteration.
pub struct CollapsedSampler {
    data: ModelData,
    config: McmcConfig,
    priors: Priors,
    psi_prior: PsiPrior,
    rng: ChaCha8Rng,
    mh: AdaptiveMetropolis,
    eta: [f64; 3],
    psi: DVector<f64>,
    lambda: Option<f64>,
    omegas: Vec<OmegaFactor>,
    terms: DataTerms,
    loglik: f64,
    iteration: usize,
}

impl CollapsedSampler {
    pub fn new(dataset: &TrajectoryDataset, spec: &ModelSpec, config: &McmcConfig) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let data = ModelData::new(dataset, spec)?;
        let psi_prior = PsiPrior::new(data.design(), spec);
        let p = data.width();
        let n = if config.likelihood { data.n_obs() } else { 0 };

        let lambda = spec
            .spatial_spline
            .as_ref()
            .map(|_| config.initial.lambda.unwrap_or(spec.priors.lambda.shape / spec.priors.lambda.rate));

        let (xtx, xty) = if config.likelihood { data.gram() } else { (DMatrix::zeros(p, p), DVector::zeros(p)) };
        let psi = match &config.initial.psi {
            Some(v) if v.len() == p => DVector::from_column_slice(v),
            Some(v) => return Err(Error::Dimension { expected: p, got: v.len() }),
            None => {
                let a = &xtx + psi_prior.precision(lambda.unwrap_or(1.0));
                let b = &xty + psi_prior.precision_mean();
                a.cholesky()
                    .ok_or_else(|| Error::Numerical("least-squares start is not identifiable".into()))?
                    .solve(&b)
            }
        };

        let resid_var = if n >= 2 {
            let rss: f64 = data.blocks.iter().flat_map(|b| data.residual(b, psi.as_slice())).map(|r| r * r).sum();
            rss / (n - 1) as f64
        } else {
            f64::NAN
        };
        let half = if resid_var.is_finite() && resid_var > 0.0 { 0.5 * resid_var } else { 1.0 };
        let sigma2 = config.initial.sigma2.unwrap_or(half);
        let tau2 = config.initial.tau2.unwrap_or(half);
        let phi = config
            .initial
            .phi
            .unwrap_or_else(|| data.mean_gap().filter(|g| *g > 0.0).map_or(1.0, |g| 0.1 / g));
        let eta = [sigma2.ln(), phi.ln(), tau2.ln()];

        let sd = config.proposal_sd.unwrap_or_else(|| {
            let s = (3.0 / (n.max(1) as f64).sqrt()).min(1.0);
            [s; 3]
        });

        let mut sampler = CollapsedSampler {
            config: config.clone(),
            priors: spec.priors.clone(),
            psi_prior,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            mh: AdaptiveMetropolis::new(sd, config.adaptation.clone()),
            eta,
            psi,
            lambda,
            omegas: Vec::new(),
            terms: DataTerms::zeros(p),
            loglik: 0.0,
            iteration: 0,
            data,
        };
        sampler.refresh()?;
        Ok(sampler)
    }

    /// Rebuilds every cached quantity from the current state.
    fn refresh(&mut self) -> Result<()> {
        if !self.config.likelihood {
            return Ok(());
        }
        let (k, n) = eta_params(self.eta)
            .ok_or_else(|| Error::Numerical(format!("invalid covariance parameters {:?}", self.eta)))?;
        self.omegas = self.data.omegas(&k, &n)?;
        self.terms = self.data.data_terms(&self.omegas);
        self.loglik = self.data.loglik_with(&self.omegas, self.psi.as_slice());
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.data.design().names
    }

    pub fn model_data(&self) -> &ModelData {
        &self.data
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Current `(σ², φ, τ²)`.
    pub fn covariance_params(&self) -> [f64; 3] {
        self.eta.map(f64::exp)
    }

    pub fn psi(&self) -> &[f64] {
        self.psi.as_slice()
    }

    pub fn step(&mut self) -> Result<Draw> {
        if !self.config.cache {
            self.refresh()?;
        }
        let priors = self.priors.clone();
        let current_lp = self.loglik + log_prior_eta(self.eta, &priors);

        let mut stash: Option<(f64, Vec<OmegaFactor>)> = None;
        let likelihood = self.config.likelihood;
        let data = &self.data;
        let psi = self.psi.as_slice();
        let target = |eta: [f64; 3]| -> f64 {
            let lp = log_prior_eta(eta, &priors);
            if !lp.is_finite() {
                return f64::NEG_INFINITY;
            }
            if !likelihood {
                return lp;
            }
            let Some((k, n)) = eta_params(eta) else {
                return f64::NEG_INFINITY;
            };
            match data.propose_loglik(psi, &k, &n) {
                Ok((ll, om)) => {
                    stash = Some((ll, om));
                    ll + lp
                }
                Err(_) => f64::NEG_INFINITY,
            }
        };
        let out = self.mh.step(self.eta, current_lp, target, &mut self.rng);
        if out.accepted {
            self.eta = out.state;
            if likelihood {
                let (ll, om) = stash.take().expect("accepted proposal has factors");
                self.loglik = ll;
                self.omegas = om;
                self.terms = self.data.data_terms(&self.omegas);
            }
        }
        if self.config.adaptation.freeze_after_burnin && self.iteration + 1 == self.config.n_burnin {
            self.mh.freeze();
        }

        if self.config.update_psi {
            self.psi = gibbs_psi(&self.terms, &self.psi_prior, self.lambda.unwrap_or(0.0), &mut self.rng)?;
        }
        if let (Some(_), true) = (self.lambda, self.config.update_lambda) {
            let (_, pen) = self.psi_prior.penalty.as_ref().expect("spatial penalty");
            let beta_s = self.psi_prior.penalized(self.psi.as_slice()).expect("spatial block");
            self.lambda = Some(gibbs_lambda(
                beta_s,
                pen,
                &self.priors.lambda,
                self.config.lambda_update,
                &mut self.rng,
            )?);
        }
        if likelihood && self.config.update_psi {
            self.loglik = self.data.loglik_with(&self.omegas, self.psi.as_slice());
        }

        let [sigma2, phi, tau2] = self.covariance_params();
        let draw = Draw {
            iteration: self.iteration,
            accepted: out.accepted,
            sigma2,
            phi,
            tau2,
            lambda: self.lambda,
            psi: self.psi.as_slice().to_vec(),
            loglik: if likelihood { self.loglik } else { f64::NAN },
        };
        self.iteration += 1;
        Ok(draw)
    }
}

/// Runs the full chain, handing every draw to `on_draw` as it is produced.
pub fn run_mcmc_with<F>(
    dataset: &TrajectoryDataset,
    spec: &ModelSpec,
    config: &McmcConfig,
    mut on_draw: F,
) -> Result<PosteriorChain>
where
    F: FnMut(&Draw) -> Result<()>,
{
    let mut sampler = CollapsedSampler::new(dataset, spec, config)?;
    let mut draws = Vec::with_capacity(config.n_iter);
    for _ in 0..config.n_iter {
        let d = sampler.step()?;
        on_draw(&d)?;
        draws.push(d);
    }
    Ok(PosteriorChain { names: sampler.names().to_vec(), n_burnin: config.n_burnin, draws })
}

pub fn run_mcmc(dataset: &TrajectoryDataset, spec: &ModelSpec, config: &McmcConfig) -> Result<PosteriorChain> {
    run_mcmc_with(dataset, spec, config, |_| Ok(()))
}
