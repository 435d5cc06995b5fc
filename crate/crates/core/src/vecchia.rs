//! Nearest-neighbour (Vecchia) approximation of a temporal Gaussian process.
//!
//! For time-ordered observations the `m` nearest past neighbours of point `i`
//! are simply its `m` predecessors, so the directed acyclic graph is a band.
//! The approximate precision is `C̃⁻¹ = (I - A)ᵀ D⁻¹ (I - A)` with `A` strictly
//! lower triangular of bandwidth `m`, and `Ω = C̃⁻¹ + τ⁻² I` shares that band.
//! The collapsed likelihood `N(y | μ, C̃ + τ² I)` is evaluated through `Ω` with
//! the Sherman-Woodbury-Morrison identity
//! `(C̃ + τ² I)⁻¹ = τ⁻² I - τ⁻⁴ Ω⁻¹` and
//! `log det(C̃ + τ² I) = n log τ² + log det C̃ + log det Ω`.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::banded::{BandedCholesky, SymBanded};
use crate::kernel::{Covariance, NoiseParams};
use crate::{Error, Result};

/// Past-neighbour sets `N(i) = {max(0, i - m), …, i - 1}` (zero based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborIndex {
    n_obs: usize,
    m: usize,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.n_obs
    }

    pub fn is_empty(&self) -> bool {
        self.n_obs == 0
    }

    /// Neighbour budget.
    pub fn budget(&self) -> usize {
        self.m
    }

    /// Parents of observation `i`, as a contiguous range of earlier indices.
    pub fn parents(&self, i: usize) -> Range<usize> {
        i.saturating_sub(self.m)..i
    }
}

pub fn build_neighbor_index(n_obs: usize, m: usize) -> Result<NeighborIndex> {
    if m == 0 {
        return Err(Error::Config("neighbour budget m must be at least 1".into()));
    }
    Ok(NeighborIndex { n_obs, m })
}

/// Sparse factors `(A, d)` of one individual's approximate precision matrix.
///
/// Row `i` of `A` is stored in `m` slots; slot `s` holds column `i - m + s`,
/// so rows with fewer than `m` parents are zero-padded at the front.
#[derive(Debug, Clone, PartialEq)]
pub struct VecchiaFactor {
    m: usize,
    a: Vec<f64>,
    d: Vec<f64>,
}

impl VecchiaFactor {
    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn bandwidth(&self) -> usize {
        self.m
    }

    /// Conditional variances `d_ii`.
    pub fn conditional_variances(&self) -> &[f64] {
        &self.d
    }

    /// Coefficient `A[i, j]`; zero outside the neighbour set.
    pub fn coefficient(&self, i: usize, j: usize) -> f64 {
        if j >= i || i - j > self.m {
            return 0.0;
        }
        self.a[i * self.m + (j + self.m - i)]
    }

    /// Row `i` of `A` as `(first column, coefficients)`.
    pub fn row(&self, i: usize) -> (usize, &[f64]) {
        let first = i.saturating_sub(self.m);
        let skip = self.m - (i - first);
        (first, &self.a[i * self.m + skip..(i + 1) * self.m])
    }

    /// Dense `(I - A)ᵀ D⁻¹ (I - A)`, for tests.
    pub fn precision_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut ia = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            let (first, coefs) = self.row(i);
            for (k, c) in coefs.iter().enumerate() {
                ia[(i, first + k)] -= c;
            }
        }
        let dinv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            n,
            self.d.iter().map(|d| 1.0 / d),
        ));
        ia.transpose() * dinv * ia
    }
}

/// In-place Cholesky of the leading `q × q` block of a row-major buffer with
/// stride `ld`. Returns the failing pivot index on breakdown.
fn small_cholesky(buf: &mut [f64], q: usize, ld: usize) -> std::result::Result<(), usize> {
    for j in 0..q {
        let mut s = buf[j * ld + j];
        for k in 0..j {
            s -= buf[j * ld + k] * buf[j * ld + k];
        }
        if !(s > 0.0) {
            return Err(j);
        }
        let ljj = s.sqrt();
        buf[j * ld + j] = ljj;
        for i in j + 1..q {
            let mut s = buf[i * ld + j];
            for k in 0..j {
                s -= buf[i * ld + k] * buf[j * ld + k];
            }
            buf[i * ld + j] = s / ljj;
        }
    }
    Ok(())
}

/// Solves the `m × m` neighbour systems `C[N(i), N(i)] aᵢ = C[N(i), i]` for
/// every observation, in `O(T m³)`.
///
/// The covariance of the sliding window of the last `m + 1` points is kept and
/// shifted as `i` advances, so each row costs `m + 1` kernel evaluations.
pub fn build_factors<K: Covariance + ?Sized>(
    times: &[f64],
    kernel: &K,
    idx: &NeighborIndex,
) -> Result<VecchiaFactor> {
    if times.len() != idx.len() {
        return Err(Error::Dimension { expected: idx.len(), got: times.len() });
    }
    for (i, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::Data(format!(
                "times must be strictly increasing (index {} has {} after {})",
                i + 1,
                w[1],
                w[0]
            )));
        }
    }
    let n = times.len();
    let m = idx.budget();
    let ld = m + 1;
    let sill = kernel.sill();
    let mut a = vec![0.0; n * m];
    let mut d = vec![0.0; n];

    // covariance of the window [start, i] in the top-left corner
    let mut window = vec![0.0; ld * ld];
    let mut chol = vec![0.0; ld * ld];
    let mut rhs = vec![0.0; m];
    let mut start = 0usize;
    for i in 0..n {
        let first = idx.parents(i).start;
        if first > start {
            // drop the oldest point
            let q = i - start;
            for r in 1..q {
                for c in 1..q {
                    window[(r - 1) * ld + (c - 1)] = window[r * ld + c];
                }
            }
            start = first;
        }
        let q = i - start;
        for c in 0..q {
            let v = kernel.cov(times[i] - times[start + c]);
            window[q * ld + c] = v;
            window[c * ld + q] = v;
        }
        window[q * ld + q] = sill;
        if q == 0 {
            d[i] = sill;
            continue;
        }
        for r in 0..q {
            chol[r * ld..r * ld + q].copy_from_slice(&window[r * ld..r * ld + q]);
        }
        small_cholesky(&mut chol, q, ld).map_err(|k| {
            Error::Numerical(format!(
                "singular neighbour block for observation {i} (pivot at parent {})",
                start + k
            ))
        })?;
        rhs[..q].copy_from_slice(&window[q * ld..q * ld + q]);
        for r in 0..q {
            let mut s = rhs[r];
            for k in 0..r {
                s -= chol[r * ld + k] * rhs[k];
            }
            rhs[r] = s / chol[r * ld + r];
        }
        for r in (0..q).rev() {
            let mut s = rhs[r];
            for k in r + 1..q {
                s -= chol[k * ld + r] * rhs[k];
            }
            rhs[r] = s / chol[r * ld + r];
        }
        let row = &mut a[i * m + (m - q)..(i + 1) * m];
        row.copy_from_slice(&rhs[..q]);
        let explained: f64 = rhs[..q].iter().zip(&window[q * ld..q * ld + q]).map(|(x, c)| x * c).sum();
        let di = sill - explained;
        if !(di > 0.0) || !di.is_finite() {
            return Err(Error::Numerical(format!(
                "non-positive conditional variance {di:e} at observation {i}"
            )));
        }
        d[i] = di;
    }
    Ok(VecchiaFactor { m, a, d })
}

/// `wᵀ C̃⁻¹ w = ‖D^{-1/2} (I - A) w‖²`.
pub fn vecchia_quadform(factor: &VecchiaFactor, w: &[f64]) -> Result<f64> {
    if w.len() != factor.len() {
        return Err(Error::Dimension { expected: factor.len(), got: w.len() });
    }
    let mut q = 0.0;
    for i in 0..w.len() {
        let (first, coefs) = factor.row(i);
        let pred: f64 = coefs.iter().zip(&w[first..i]).map(|(c, x)| c * x).sum();
        let e = w[i] - pred;
        q += e * e / factor.d[i];
    }
    Ok(q)
}

/// `log det C̃ = Σ log d_ii`.
pub fn vecchia_logdet(factor: &VecchiaFactor) -> f64 {
    factor.d.iter().map(|d| d.ln()).sum()
}

/// `Ω = (I - A)ᵀ D⁻¹ (I - A) + τ⁻² I` in banded storage.
pub fn assemble_omega(factor: &VecchiaFactor, noise: &NoiseParams) -> SymBanded {
    let n = factor.len();
    let m = factor.m;
    let mut omega = SymBanded::zeros(n, m);
    let mut v = vec![0.0; m + 1];
    let mut cols = vec![0usize; m + 1];
    for i in 0..n {
        let (first, coefs) = factor.row(i);
        let q = coefs.len();
        for (s, c) in coefs.iter().enumerate() {
            v[s] = -c;
            cols[s] = first + s;
        }
        v[q] = 1.0;
        cols[q] = i;
        let dinv = 1.0 / factor.d[i];
        for s in 0..=q {
            let vs = v[s] * dinv;
            for t in 0..=s {
                omega.add_lower(cols[s], cols[t], vs * v[t]);
            }
        }
    }
    let tau_inv = 1.0 / noise.tau2;
    for i in 0..n {
        omega.add_lower(i, i, tau_inv);
    }
    omega
}

/// `Ω` factorised, with the log-determinants needed by the likelihood.
#[derive(Debug, Clone)]
pub struct OmegaFactor {
    chol: BandedCholesky,
    log_det_omega: f64,
    log_det_c: f64,
    tau2: f64,
}

impl OmegaFactor {
    pub fn len(&self) -> usize {
        self.chol.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.chol.dim() == 0
    }

    pub fn bandwidth(&self) -> usize {
        self.chol.bandwidth()
    }

    pub fn cholesky(&self) -> &BandedCholesky {
        &self.chol
    }

    pub fn log_det_omega(&self) -> f64 {
        self.log_det_omega
    }

    /// `log det C̃` of the factor this was built from.
    pub fn log_det_c(&self) -> f64 {
        self.log_det_c
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    /// `log det(C̃ + τ² I) = n log τ² + log det C̃ + log det Ω`.
    pub fn log_det_lambda(&self) -> f64 {
        self.len() as f64 * self.tau2.ln() + self.log_det_c + self.log_det_omega
    }

    /// `Ω⁻¹ r`.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        self.chol.solve(r)
    }

    /// `Ω⁻¹ X` for a row-major `n × p` matrix.
    pub fn solve_rows(&self, x: &[f64], p: usize) -> Vec<f64> {
        let mut u = x.to_vec();
        self.chol.solve_rows_in_place(&mut u, p);
        u
    }

    /// `(C̃ + τ² I)⁻¹ r = r / τ² - Ω⁻¹ r / τ⁴`.
    pub fn apply_lambda_inv(&self, r: &[f64]) -> Vec<f64> {
        let v = self.solve(r);
        let t2 = self.tau2;
        r.iter().zip(&v).map(|(ri, vi)| ri / t2 - vi / (t2 * t2)).collect()
    }
}

pub fn build_omega(factor: &VecchiaFactor, noise: &NoiseParams) -> Result<OmegaFactor> {
    let chol = assemble_omega(factor, noise).cholesky()?;
    Ok(OmegaFactor {
        log_det_omega: chol.log_det(),
        log_det_c: vecchia_logdet(factor),
        tau2: noise.tau2,
        chol,
    })
}

/// Neighbour index, factors and `Ω` for one individual in one call.
pub fn omega_for<K: Covariance + ?Sized>(
    times: &[f64],
    m: usize,
    kernel: &K,
    noise: &NoiseParams,
) -> Result<OmegaFactor> {
    let idx = build_neighbor_index(times.len(), m)?;
    let factor = build_factors(times, kernel, &idx)?;
    build_omega(&factor, noise)
}

/// Row-major view of a dense matrix.
#[derive(Debug, Clone, Copy)]
pub struct RowMajor<'a> {
    pub data: &'a [f64],
    pub cols: usize,
}

/// One individual's input to [`collapsed_loglik`].
#[derive(Debug, Clone, Copy)]
pub struct LikBlock<'a> {
    /// `r = y - X* ψ`.
    pub residual: &'a [f64],
    /// When present, `u = Ω⁻¹ X` is computed and returned.
    pub design: Option<RowMajor<'a>>,
}

/// Per-individual solves retained for the Gibbs step.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    /// `v = Ω⁻¹ r`.
    pub v: Vec<f64>,
    /// `u = Ω⁻¹ X`, row-major, when a design was supplied.
    pub u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedLik {
    /// `log N(y | mean, C̃ + τ² I)` including `-(n/2) log 2π`.
    pub loglik: f64,
    /// `q2 = rᵀr/τ² - rᵀv/τ⁴`.
    pub q2: f64,
    /// `log q1 = n log τ² + Σ log d + Σ log det Ω`.
    pub log_q1: f64,
    pub caches: Vec<BlockCache>,
}

struct BlockTerms {
    n: usize,
    quad: f64,
    log_det: f64,
    cache: BlockCache,
}

fn block_terms(block: &LikBlock<'_>, omega: &OmegaFactor) -> Result<BlockTerms> {
    let r = block.residual;
    if r.len() != omega.len() {
        return Err(Error::Dimension { expected: omega.len(), got: r.len() });
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite residual".into()));
    }
    let t2 = omega.tau2();
    let v = omega.solve(r);
    let rr: f64 = r.iter().map(|x| x * x).sum();
    let rv: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
    let u = match block.design {
        Some(x) => {
            if x.data.len() != r.len() * x.cols {
                return Err(Error::Dimension { expected: r.len() * x.cols, got: x.data.len() });
            }
            Some(omega.solve_rows(x.data, x.cols))
        }
        None => None,
    };
    Ok(BlockTerms {
        n: r.len(),
        quad: rr / t2 - rv / (t2 * t2),
        log_det: omega.log_det_lambda(),
        cache: BlockCache { v, u },
    })
}

/// Collapsed Gaussian log-likelihood summed over independent individuals.
///
/// Blocks are processed in parallel and reduced in their given order, so the
/// result does not depend on scheduling.
pub fn collapsed_loglik(blocks: &[LikBlock<'_>], omegas: &[OmegaFactor]) -> Result<CollapsedLik> {
    if blocks.len() != omegas.len() {
        return Err(Error::Dimension { expected: omegas.len(), got: blocks.len() });
    }
    let terms: Vec<BlockTerms> = blocks
        .par_iter()
        .zip(omegas.par_iter())
        .map(|(b, o)| block_terms(b, o))
        .collect::<Result<_>>()?;
    let mut n = 0usize;
    let mut q2 = 0.0;
    let mut log_q1 = 0.0;
    let mut caches = Vec::with_capacity(terms.len());
    for t in terms {
        n += t.n;
        q2 += t.quad;
        log_q1 += t.log_det;
        caches.push(t.cache);
    }
    Ok(CollapsedLik {
        loglik: -0.5 * (n as f64 * (2.0 * PI).ln() + log_q1 + q2),
        q2,
        log_q1,
        caches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{cov_matrix, KernelParams};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_times(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut t = 0.0;
        (0..n)
            .map(|_| {
                t += rng.random_range(0.01..1.0);
                t
            })
            .collect()
    }

    #[test]
    fn neighbour_sets_follow_definition() {
        let idx = build_neighbor_index(5, 2).unwrap();
        let sets: Vec<Vec<usize>> = (0..5).map(|i| idx.parents(i).collect()).collect();
        assert_eq!(sets, vec![vec![], vec![0], vec![0, 1], vec![1, 2], vec![2, 3]]);

        let idx = build_neighbor_index(4, 10).unwrap();
        for i in 0..4 {
            assert_eq!(idx.parents(i), 0..i);
        }

        let idx = build_neighbor_index(100_000, 10).unwrap();
        assert!((10..100_000).all(|i| idx.parents(i).len() == 10));
        assert!((0..100_000).all(|i| idx.parents(i).end == i));

        assert!(matches!(build_neighbor_index(5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn single_point_factor() {
        let p = KernelParams::new(2.5, 1.0).unwrap();
        let idx = build_neighbor_index(1, 3).unwrap();
        let f = build_factors(&[4.0], &p, &idx).unwrap();
        assert_eq!(f.conditional_variances(), &[2.5]);
        assert_eq!(f.row(0).1.len(), 0);
    }

    #[test]
    fn two_point_conditional() {
        let p = KernelParams::new(1.0, 1.0).unwrap();
        let idx = build_neighbor_index(2, 1).unwrap();
        let f = build_factors(&[0.0, 1.0], &p, &idx).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((f.coefficient(1, 0) - e1).abs() < 1e-15);
        assert!((f.conditional_variances()[1] - (1.0 - (-2.0f64).exp())).abs() < 1e-15);
        // log(1 - e^-2)
        assert!((vecchia_logdet(&f) - (-0.145_413_457_868_859_86)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_times_rejected() {
        let p = KernelParams::new(1.0, 1.0).unwrap();
        let idx = build_neighbor_index(3, 2).unwrap();
        let err = build_factors(&[0.0, 1.0, 1.0], &p, &idx).unwrap_err();
        assert!(err.to_string().contains("index 2"), "{err}");
    }

    #[test]
    fn full_conditioning_reproduces_dense_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let times = random_times(100, &mut rng);
        let p = KernelParams::new(1.3, 0.8).unwrap();
        let idx = build_neighbor_index(100, 99).unwrap();
        let f = build_factors(&times, &p, &idx).unwrap();
        let dense = cov_matrix(&times, &p);
        let cinv = dense.clone().cholesky().unwrap().inverse();
        let approx = f.precision_dense();
        let rel = (&approx - &cinv).abs().max() / cinv.abs().max();
        assert!(rel < 1e-8, "relative error {rel}");

        let ld_dense = 2.0 * dense.clone().cholesky().unwrap().l().diagonal().map(|x| x.ln()).sum();
        assert!((vecchia_logdet(&f) - ld_dense).abs() < 1e-8 * ld_dense.abs().max(1.0));
    }

    #[test]
    fn quadform_against_dense_solve() {
        let p = KernelParams::new(4.0, 1.0).unwrap();
        let idx = build_neighbor_index(1, 1).unwrap();
        let f = build_factors(&[0.0], &p, &idx).unwrap();
        assert_eq!(vecchia_quadform(&f, &[2.0]).unwrap(), 1.0);
        assert_eq!(vecchia_quadform(&f, &[0.0]).unwrap(), 0.0);
        assert!(matches!(vecchia_quadform(&f, &[0.0, 1.0]), Err(Error::Dimension { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let times = random_times(50, &mut rng);
        let p = KernelParams::new(0.7, 2.0).unwrap();
        let idx = build_neighbor_index(50, 49).unwrap();
        let f = build_factors(&times, &p, &idx).unwrap();
        let w: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dense = cov_matrix(&times, &p).cholesky().unwrap();
        let wv = DVector::from_vec(w.clone());
        let exact = wv.dot(&dense.solve(&wv));
        let q = vecchia_quadform(&f, &w).unwrap();
        assert!((q - exact).abs() < 1e-8 * exact, "{q} vs {exact}");
    }

    #[test]
    fn omega_band_and_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = KernelParams::new(1.0, 1.0).unwrap();
        let noise = NoiseParams::new(0.5).unwrap();

        let idx = build_neighbor_index(1, 4).unwrap();
        let f = build_factors(&[0.0], &p, &idx).unwrap();
        let om = assemble_omega(&f, &noise);
        assert!((om.get(0, 0) - (1.0 + 2.0)).abs() < 1e-15);

        let times = random_times(200, &mut rng);
        for m in [1, 3, 10] {
            let idx = build_neighbor_index(200, m).unwrap();
            let f = build_factors(&times, &p, &idx).unwrap();
            let om = assemble_omega(&f, &noise);
            assert_eq!(om.bandwidth(), m);
            let dense = om.to_dense();
            for i in 0..200usize {
                for j in 0..200 {
                    if i.abs_diff(j) > m {
                        assert_eq!(dense[(i, j)], 0.0);
                    }
                }
            }
            let expected = f.precision_dense() + DMatrix::identity(200, 200) / noise.tau2;
            assert!((&dense - &expected).abs().max() < 1e-10);
        }
    }

    #[test]
    fn scalar_loglik() {
        let p = KernelParams::new(1.0, 1.0).unwrap();
        let noise = NoiseParams::new(1.0).unwrap();
        let om = omega_for(&[0.0], 1, &p, &noise).unwrap();
        let r = [0.0];
        let lik = collapsed_loglik(&[LikBlock { residual: &r, design: None }], &[om]).unwrap();
        assert!((lik.loglik - (-0.5 * (2.0 * PI * 2.0).ln())).abs() < 1e-14);
        assert_eq!(lik.q2, 0.0);
    }

    #[test]
    fn nonfinite_residual_is_data_error() {
        let p = KernelParams::new(1.0, 1.0).unwrap();
        let noise = NoiseParams::new(1.0).unwrap();
        let om = omega_for(&[0.0, 1.0], 1, &p, &noise).unwrap();
        let r = [0.0, f64::NAN];
        let err = collapsed_loglik(&[LikBlock { residual: &r, design: None }], &[om]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
