//! Clamped B-spline bases and shrinkage penalties for spline coefficients.
//!
//! A 1-D basis is configured by its domain, degree and basis size `J`; the
//! clamped knot vector has `degree + 1` copies of each boundary knot and
//! `J - degree - 1` equispaced internal knots. Tensor-product coefficients are
//! flattened row-major: `(jx, jy) ↦ jx · J_y + jy`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineBasisSpec1D {
    pub lower: f64,
    pub upper: f64,
    pub degree: usize,
    pub n_basis: usize,
}

impl SplineBasisSpec1D {
    pub fn new(lower: f64, upper: f64, degree: usize, n_basis: usize) -> Result<Self> {
        let spec = SplineBasisSpec1D { lower, upper, degree, n_basis };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::Config(format!(
                "spline domain [{}, {}] is empty or not finite",
                self.lower, self.upper
            )));
        }
        if self.n_basis < self.degree + 1 {
            return Err(Error::Config(format!(
                "n_basis {} must be at least degree + 1 = {}",
                self.n_basis,
                self.degree + 1
            )));
        }
        Ok(())
    }

    pub fn n_internal_knots(&self) -> usize {
        self.n_basis - self.degree - 1
    }

    /// Full clamped knot vector, length `n_basis + degree + 1`.
    pub fn knots(&self) -> Vec<f64> {
        let p = self.degree;
        let inner = self.n_internal_knots();
        let width = self.upper - self.lower;
        let mut knots = Vec::with_capacity(self.n_basis + p + 1);
        knots.extend(std::iter::repeat_n(self.lower, p + 1));
        for k in 1..=inner {
            knots.push(self.lower + width * k as f64 / (inner + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(self.upper, p + 1));
        knots
    }

    /// Distinct knot locations (boundaries included).
    pub fn breakpoints(&self) -> Vec<f64> {
        let inner = self.n_internal_knots();
        (0..=inner + 1)
            .map(|k| self.lower + (self.upper - self.lower) * k as f64 / (inner + 1) as f64)
            .collect()
    }

    /// The at most `degree + 1` non-zero basis values at `x`, with the index
    /// of the first. Evaluation at the upper bound returns the left limit.
    pub fn eval_nonzero(&self, x: f64) -> Result<(usize, Vec<f64>)> {
        if !(x >= self.lower && x <= self.upper) {
            return Err(Error::Domain(format!(
                "{x} lies outside the spline domain [{}, {}]",
                self.lower, self.upper
            )));
        }
        let p = self.degree;
        let knots = self.knots();
        let span = self.find_span(x, &knots);
        // Cox-de Boor triangle
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - knots[span + 1 - j];
            right[j] = knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((span - p, n))
    }

    fn find_span(&self, x: f64, knots: &[f64]) -> usize {
        let p = self.degree;
        let last = self.n_basis - 1;
        if x >= knots[last + 1] {
            return last;
        }
        // knots[span] <= x < knots[span + 1], span in [p, last]
        let mut lo = p;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }
}

/// All `J` basis values at `x`.
pub fn eval_basis_1d(x: f64, spec: &SplineBasisSpec1D) -> Result<Vec<f64>> {
    let (first, vals) = spec.eval_nonzero(x)?;
    let mut out = vec![0.0; spec.n_basis];
    out[first..first + vals.len()].copy_from_slice(&vals);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorBasisSpec {
    pub x: SplineBasisSpec1D,
    pub y: SplineBasisSpec1D,
}

impl TensorBasisSpec {
    pub fn new(x: SplineBasisSpec1D, y: SplineBasisSpec1D) -> Result<Self> {
        x.validate()?;
        y.validate()?;
        Ok(TensorBasisSpec { x, y })
    }

    /// `J_S = J_x · J_y`.
    pub fn n_basis(&self) -> usize {
        self.x.n_basis * self.y.n_basis
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.x.n_basis, self.y.n_basis)
    }

    pub fn flat_index(&self, jx: usize, jy: usize) -> usize {
        jx * self.y.n_basis + jy
    }

    /// Non-zero tensor values as `(flat index, value)` pairs.
    pub fn eval_nonzero(&self, x: f64, y: f64) -> Result<Vec<(usize, f64)>> {
        let (fx, vx) = self.x.eval_nonzero(x)?;
        let (fy, vy) = self.y.eval_nonzero(y)?;
        let mut out = Vec::with_capacity(vx.len() * vy.len());
        for (i, bx) in vx.iter().enumerate() {
            for (j, by) in vy.iter().enumerate() {
                out.push((self.flat_index(fx + i, fy + j), bx * by));
            }
        }
        Ok(out)
    }
}

pub fn eval_basis_tensor(x: f64, y: f64, spec: &TensorBasisSpec) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spec.n_basis()];
    for (k, v) in spec.eval_nonzero(x, y)? {
        out[k] = v;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Identity precision (shrinkage towards zero).
    RidgeLike,
    /// First-order random walk over the rook-adjacency grid of coefficients.
    RandomWalk1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub kind: PenaltyKind,
    pub matrix: DMatrix<f64>,
    /// Rank of `matrix`, used by the conjugate shrinkage update.
    pub rank: usize,
}

impl PenaltyMatrix {
    /// `βᵀ P β`.
    pub fn quadratic_form(&self, beta: &[f64]) -> f64 {
        let n = self.matrix.nrows();
        assert_eq!(beta.len(), n);
        let mut q = 0.0;
        for j in 0..n {
            let col = self.matrix.column(j);
            let mut s = 0.0;
            for i in 0..n {
                s += col[i] * beta[i];
            }
            q += beta[j] * s;
        }
        q
    }
}

/// Penalty over a `jx × jy` coefficient grid.
pub fn build_penalty(kind: PenaltyKind, jx: usize, jy: usize) -> PenaltyMatrix {
    let n = jx * jy;
    match kind {
        PenaltyKind::RidgeLike => PenaltyMatrix { kind, matrix: DMatrix::identity(n, n), rank: n },
        PenaltyKind::RandomWalk1 => {
            let mut p = DMatrix::zeros(n, n);
            let idx = |a: usize, b: usize| a * jy + b;
            for a in 0..jx {
                for b in 0..jy {
                    let i = idx(a, b);
                    let mut link = |j: usize| {
                        p[(i, j)] = -1.0;
                        p[(i, i)] += 1.0;
                    };
                    if a > 0 {
                        link(idx(a - 1, b));
                    }
                    if a + 1 < jx {
                        link(idx(a + 1, b));
                    }
                    if b > 0 {
                        link(idx(a, b - 1));
                    }
                    if b + 1 < jy {
                        link(idx(a, b + 1));
                    }
                }
            }
            // the rook grid is connected, so the null space is the constants
            PenaltyMatrix { kind, matrix: p, rank: n.saturating_sub(1) }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook recursive definition over the full knot vector, right-closed
    /// at the last non-degenerate interval.
    fn de_boor_reference(i: usize, p: usize, x: f64, knots: &[f64]) -> f64 {
        if p == 0 {
            let last = knots[knots.len() - 1];
            let inside = knots[i] <= x && x < knots[i + 1];
            let at_end = x == last && knots[i] < knots[i + 1] && knots[i + 1] == last;
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * de_boor_reference(i, p - 1, x, knots);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - x) / d2 * de_boor_reference(i + 1, p - 1, x, knots);
        }
        v
    }

    #[test]
    fn knot_vector_layout() {
        let s = SplineBasisSpec1D::new(1.0, 10.0, 2, 9).unwrap();
        let k = s.knots();
        assert_eq!(k.len(), 12);
        assert_eq!(&k[..3], &[1.0, 1.0, 1.0]);
        assert_eq!(&k[9..], &[10.0, 10.0, 10.0]);
        assert_eq!(s.n_internal_knots(), 6);
        assert!(k.windows(2).all(|w| w[0] <= w[1]));
        assert!(SplineBasisSpec1D::new(0.0, 1.0, 3, 3).is_err());
        assert!(SplineBasisSpec1D::new(1.0, 1.0, 0, 3).is_err());
    }

    #[test]
    fn degree_zero_indicator() {
        let s = SplineBasisSpec1D::new(0.0, 2.0, 0, 2).unwrap();
        assert_eq!(eval_basis_1d(0.5, &s).unwrap(), vec![1.0, 0.0]);
        assert_eq!(eval_basis_1d(1.5, &s).unwrap(), vec![0.0, 1.0]);
        assert_eq!(eval_basis_1d(2.0, &s).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn out_of_domain_is_error() {
        let s = SplineBasisSpec1D::new(7.0, 23.0, 2, 6).unwrap();
        assert!(matches!(eval_basis_1d(6.99, &s), Err(Error::Domain(_))));
        assert!(matches!(eval_basis_1d(23.01, &s), Err(Error::Domain(_))));
        assert!(eval_basis_1d(f64::NAN, &s).is_err());
    }

    #[test]
    fn hour_basis_matches_reference_recursion() {
        let s = SplineBasisSpec1D::new(7.0, 23.0, 2, 6).unwrap();
        let knots = s.knots();
        for &x in &[7.0, 9.3, 15.0, 18.2, 22.999, 23.0] {
            let got = eval_basis_1d(x, &s).unwrap();
            for (i, g) in got.iter().enumerate() {
                let want = de_boor_reference(i, 2, x, &knots);
                assert!((g - want).abs() < 1e-14, "x={x} i={i}: {g} vs {want}");
            }
        }
        // evaluation at the closed end equals the left limit
        let at = eval_basis_1d(23.0, &s).unwrap();
        let near = eval_basis_1d(23.0 - 1e-12, &s).unwrap();
        for (a, b) in at.iter().zip(&near) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn partition_of_unity_and_local_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs = [
            SplineBasisSpec1D::new(7.0, 23.0, 2, 6).unwrap(),
            SplineBasisSpec1D::new(1.0, 10.0, 2, 9).unwrap(),
            SplineBasisSpec1D::new(-3.0, 4.0, 3, 12).unwrap(),
            SplineBasisSpec1D::new(0.0, 1.0, 0, 5).unwrap(),
        ];
        for s in &specs {
            for _ in 0..10_000 {
                let x = rng.random_range(s.lower..=s.upper);
                let b = eval_basis_1d(x, s).unwrap();
                let sum: f64 = b.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
                let nz: Vec<usize> = (0..b.len()).filter(|&i| b[i] != 0.0).collect();
                assert!(nz.len() <= s.degree + 1);
                if let (Some(a), Some(z)) = (nz.first(), nz.last()) {
                    assert_eq!(z - a + 1, nz.len(), "support must be consecutive");
                }
            }
        }

        let t = TensorBasisSpec::new(specs[1].clone(), specs[2].clone()).unwrap();
        for _ in 0..10_000 {
            let x = rng.random_range(1.0..=10.0);
            let y = rng.random_range(-3.0..=4.0);
            let b = eval_basis_tensor(x, y, &t).unwrap();
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(b.iter().filter(|v| **v != 0.0).count() <= 3 * 4);
        }
    }

    #[test]
    fn tensor_sizes_and_ordering() {
        let one = SplineBasisSpec1D::new(0.0, 1.0, 0, 1).unwrap();
        let t = TensorBasisSpec::new(one.clone(), one).unwrap();
        assert_eq!(eval_basis_tensor(0.3, 0.9, &t).unwrap(), vec![1.0]);

        let axis = SplineBasisSpec1D::new(1.0, 10.0, 2, 9).unwrap();
        let t = TensorBasisSpec::new(axis.clone(), axis.clone()).unwrap();
        assert_eq!(t.n_basis(), 81);

        let bx = eval_basis_1d(3.3, &axis).unwrap();
        let by = eval_basis_1d(7.1, &axis).unwrap();
        let bt = eval_basis_tensor(3.3, 7.1, &t).unwrap();
        for jx in 0..9 {
            for jy in 0..9 {
                assert_eq!(bt[t.flat_index(jx, jy)], bx[jx] * by[jy]);
            }
        }
        assert!(eval_basis_tensor(0.5, 5.0, &t).is_err());
    }

    #[test]
    fn ridge_is_identity() {
        let p = build_penalty(PenaltyKind::RidgeLike, 2, 2);
        assert_eq!(p.matrix, DMatrix::identity(4, 4));
        assert_eq!(p.rank, 4);
    }

    #[test]
    fn random_walk_on_two_by_two_grid() {
        let p = build_penalty(PenaltyKind::RandomWalk1, 2, 2);
        // nodes 0=(0,0) 1=(0,1) 2=(1,0) 3=(1,1); rook pairs 0-1, 0-2, 1-3, 2-3
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
             2.0, -1.0, -1.0,  0.0,
            -1.0,  2.0,  0.0, -1.0,
            -1.0,  0.0,  2.0, -1.0,
             0.0, -1.0, -1.0,  2.0,
        ]);
        assert_eq!(p.matrix, expected);
    }

    #[test]
    fn random_walk_rank_and_null_space() {
        let p = build_penalty(PenaltyKind::RandomWalk1, 3, 3);
        let eig = p.matrix.clone().symmetric_eigen();
        let zeros = eig.eigenvalues.iter().filter(|v| v.abs() < 1e-10).count();
        assert_eq!(zeros, 1);
        assert_eq!(p.rank, 8);
        assert!(eig.eigenvalues.iter().all(|v| *v > -1e-10));

        for (jx, jy) in [(3, 3), (9, 9), (4, 7), (1, 5)] {
            let p = build_penalty(PenaltyKind::RandomWalk1, jx, jy);
            let ones = nalgebra::DVector::from_element(jx * jy, 1.0);
            assert!((&p.matrix * ones).iter().all(|v| *v == 0.0));
            let diag: Vec<f64> = p.matrix.diagonal().iter().copied().collect();
            if jx > 1 && jy > 1 {
                assert!(diag.iter().all(|d| [2.0, 3.0, 4.0].contains(d)));
            }
        }
    }

    #[test]
    fn laplacian_quadratic_form_identity() {
        let (jx, jy) = (9, 9);
        let p = build_penalty(PenaltyKind::RandomWalk1, jx, jy);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let b: Vec<f64> = (0..jx * jy).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut edges = 0.0;
            for a in 0..jx {
                for c in 0..jy {
                    let i = a * jy + c;
                    if a + 1 < jx {
                        edges += (b[i] - b[i + jy]).powi(2);
                    }
                    if c + 1 < jy {
                        edges += (b[i] - b[i + 1]).powi(2);
                    }
                }
            }
            assert!((p.quadratic_form(&b) - edges).abs() < 1e-10);
        }
    }
}
