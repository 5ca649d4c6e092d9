//! Compressed sparse row matrices and a power-iteration spectral radius.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// Row-major compressed sparse matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from per-row `(column, value)` lists.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if c >= ncols {
                    return Err(Error::Shape(format!("column {c} out of range for {ncols} columns")));
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self { nrows, ncols, row_ptr, col_idx, values })
    }

    /// Keeps every entry that is not exactly zero.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| (0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).map(|j| (j, m[(i, j)])).collect())
            .collect();
        Self::from_rows(m.ncols(), rows).expect("columns are in range")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_nnz(&self, row: usize) -> usize {
        self.row_ptr[row + 1] - self.row_ptr[row]
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Dense copy of the column range `cols`.
    pub fn columns_dense(&self, cols: std::ops::Range<usize>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, cols.len());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                if cols.contains(&j) {
                    m[(i, j - cols.start)] += v;
                }
            }
        }
        m
    }

    /// `out = self * x`
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows);
        self.mul_vec_into(x.as_slice(), out.as_mut_slice());
        out
    }

    /// `out += self^T * x`
    pub fn tr_mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(out.len(), self.ncols);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * xi;
                }
            }
        }
    }

    pub(crate) fn raw_parts(&self) -> (&[usize], &[usize], &[f64]) {
        (&self.row_ptr, &self.col_idx, &self.values)
    }
}

/// Settings for [`spectral_radius`].
#[derive(Clone, Copy, Debug)]
pub struct PowerIteration {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 10_000, seed: 0 }
    }
}

/// Spectral radius of a square sparse matrix by power iteration.
///
/// Real non-symmetric matrices usually have a complex-conjugate dominant
/// pair, for which the iterates rotate instead of converging. Each iteration
/// therefore fits the two-term recurrence `x_{k+2} = a x_{k+1} + b x_k` in
/// the least-squares sense; the dominant eigenvalues are the roots of
/// `t^2 - a t - b`, which covers a real dominant eigenvalue, a `±λ` pair and a
/// complex pair alike. When consecutive iterates are collinear the plain
/// norm ratio is used.
///
/// Several distinct eigenvalues of (nearly) equal modulus defeat the
/// recurrence fit; matrices up to [`DENSE_FALLBACK_MAX`] rows then fall back
/// to a dense eigenvalue solve, larger ones report non-convergence.
pub fn spectral_radius(m: &SparseMatrix, opts: PowerIteration) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!("{}x{} is not square", m.nrows(), m.ncols())));
    }
    if let Some(radius) = power_iteration(m, opts) {
        return Ok(radius);
    }
    if m.nrows() <= DENSE_FALLBACK_MAX {
        let radius = m.to_dense().complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        if radius.is_finite() {
            return Ok(radius);
        }
    }
    Err(Error::SpectralRadius { iterations: opts.max_iter })
}

/// Largest matrix order for which [`spectral_radius`] falls back to a dense solve.
pub const DENSE_FALLBACK_MAX: usize = 2048;

fn power_iteration(m: &SparseMatrix, opts: PowerIteration) -> Option<f64> {
    let n = m.nrows();
    let mut rng = crate::seed::rng(opts.seed, "power-iteration", 0);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut x);
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut previous = f64::NAN;
    let mut settled = 0;
    for _ in 0..opts.max_iter {
        m.mul_vec_into(&x, &mut y);
        let ny = norm(&y);
        if ny == 0.0 {
            return Some(0.0);
        }
        m.mul_vec_into(&y, &mut z);
        let estimate = two_term_modulus(&x, &y, &z).unwrap_or(ny);
        if (estimate - previous).abs() <= opts.tol * estimate {
            settled += 1;
            if settled >= 3 {
                return Some(estimate);
            }
        } else {
            settled = 0;
        }
        previous = estimate;
        x.iter_mut().zip(&y).for_each(|(xi, yi)| *xi = yi / ny);
    }
    None
}

/// Largest root modulus of the recurrence fitted to `x` (unit), `y = Mx`, `z = My`.
fn two_term_modulus(x: &[f64], y: &[f64], z: &[f64]) -> Option<f64> {
    let xx = dot(x, x);
    let yy = dot(y, y);
    let xy = dot(x, y);
    let det = yy * xx - xy * xy;
    // collinear iterates: real dominant eigenvalue already resolved
    if det <= 1e-12 * yy * xx {
        return None;
    }
    let zy = dot(z, y);
    let zx = dot(z, x);
    let a = (zy * xx - zx * xy) / det;
    let b = (zx * yy - zy * xy) / det;
    let disc = a * a + 4.0 * b;
    let modulus = if disc < 0.0 {
        (-b).sqrt()
    } else {
        let s = disc.sqrt();
        ((a + s) / 2.0).abs().max(((a - s) / 2.0).abs())
    };
    modulus.is_finite().then_some(modulus)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: &mut [f64]) {
    let n = norm(a);
    a.iter_mut().for_each(|v| *v /= n);
}
