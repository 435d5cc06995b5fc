//! Symmetric banded matrices stored by lower band, and their Cholesky factors.
//!
//! Row `i` keeps the `bw + 1` entries with columns `i - bw ..= i`; rows shorter
//! than the band are zero-padded on the left. Every row is contiguous, so both
//! the factorisation and the triangular solves walk memory linearly.

use nalgebra::DMatrix;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SymBanded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl SymBanded {
    pub fn zeros(n: usize, bw: usize) -> Self {
        SymBanded { n, bw, data: vec![0.0; n * (bw + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Lower (and upper) bandwidth.
    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.offset(i, j)]
        }
    }

    /// Adds `v` to entry `(i, j)` with `j <= i` inside the band.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        let o = self.offset(i, j);
        self.data[o] += v;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// In-place banded Cholesky, `A = L Lᵀ`, in `O(n bw²)`.
    pub fn cholesky(self) -> Result<BandedCholesky> {
        let SymBanded { n, bw, mut data } = self;
        let w = bw + 1;
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                // columns shared by rows i and j inside both bands
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = data[i * w + j + bw - i];
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                for k in k0..j {
                    s -= data[ri + k] * data[rj + k];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Numerical(format!(
                            "banded matrix is not positive definite at row {i} (pivot {s:e})"
                        )));
                    }
                    data[i * w + bw] = s.sqrt();
                } else {
                    data[i * w + j + bw - i] = s / data[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, data })
    }
}

/// Lower-triangular banded Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn l(&self, i: usize, k: usize) -> f64 {
        self.data[i * (self.bw + 1) + k + self.bw - i]
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        let w = self.bw + 1;
        2.0 * (0..self.n).map(|i| self.data[i * w + self.bw].ln()).sum::<f64>()
    }

    /// Solves `L z = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let w = self.bw + 1;
        for i in 0..self.n {
            let k0 = i.saturating_sub(self.bw);
            let row = &self.data[i * w + k0 + self.bw - i..i * w + self.bw];
            let mut s = b[i];
            for (l, z) in row.iter().zip(&b[k0..i]) {
                s -= l * z;
            }
            b[i] = s / self.data[i * w + self.bw];
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn backward_in_place(&self, z: &mut [f64]) {
        assert_eq!(z.len(), self.n);
        let w = self.bw + 1;
        for i in (0..self.n).rev() {
            let xi = z[i] / self.data[i * w + self.bw];
            z[i] = xi;
            let k0 = i.saturating_sub(self.bw);
            let row = &self.data[i * w + k0 + self.bw - i..i * w + self.bw];
            for (l, zk) in row.iter().zip(&mut z[k0..i]) {
                *zk -= l * xi;
            }
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        x
    }

    /// Solves `A X = B` for a row-major `n × p` right-hand side, in place.
    pub fn solve_rows_in_place(&self, b: &mut [f64], p: usize) {
        assert_eq!(b.len(), self.n * p);
        if p == 0 {
            return;
        }
        for i in 0..self.n {
            let k0 = i.saturating_sub(self.bw);
            let (head, tail) = b.split_at_mut(i * p);
            let row = &mut tail[..p];
            for k in k0..i {
                let l = self.l(i, k);
                if l != 0.0 {
                    for (r, x) in row.iter_mut().zip(&head[k * p..(k + 1) * p]) {
                        *r -= l * x;
                    }
                }
            }
            let d = 1.0 / self.l(i, i);
            row.iter_mut().for_each(|r| *r *= d);
        }
        for i in (0..self.n).rev() {
            let d = 1.0 / self.l(i, i);
            let (head, tail) = b.split_at_mut(i * p);
            let row = &mut tail[..p];
            row.iter_mut().for_each(|r| *r *= d);
            let k0 = i.saturating_sub(self.bw);
            for k in k0..i {
                let l = self.l(i, k);
                if l != 0.0 {
                    for (x, r) in head[k * p..(k + 1) * p].iter_mut().zip(row.iter()) {
                        *x -= l * r;
                    }
                }
            }
        }
    }

    /// Dense copy of `L`, for tests and small diagnostics.
    pub fn lower_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if j <= i && i - j <= self.bw {
                self.l(i, j)
            } else {
                0.0
            }
        })
    }
}
