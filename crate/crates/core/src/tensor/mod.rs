//! Dense row-major `f64` matrices and the kernels the model is built from.
//!
//! Every binary operation checks shapes explicitly; there is no broadcasting.

mod io;
mod svd;

pub(crate) use io::read_exact_at;
pub use io::{read_matrix, write_matrix, MATRIX_MAGIC, MATRIX_VERSION};
pub use svd::{low_rank_approx, spectral_norm, stable_rank, svd, SvdResult};

use crate::error::{invalid, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Products with at least this many multiply-adds are split over output rows.
const PAR_MATMUL_THRESHOLD: usize = 1 << 18;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Entries drawn i.i.d. from `Normal(0, std)`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and >= 0");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        if n == 0 {
            return Ok(out);
        }
        let row_kernel = |(i, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        if m * k * n >= PAR_MATMUL_THRESHOLD {
            out.data.par_chunks_mut(n).enumerate().for_each(row_kernel);
        } else {
            out.data.chunks_mut(n).enumerate().for_each(row_kernel);
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.transpose().matmul(other)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.matmul(&other.transpose())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    /// `alpha·a + b`.
    pub fn axpy(alpha: f64, a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.check_same_shape(b, "axpy")?;
        Ok(a.zip_map(b, |x, y| alpha * x + y))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha·other`.
    pub fn axpy_assign(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| v * alpha)
    }

    pub fn scale_assign(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frob_inner(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "frob_inner")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copies columns `[start, start + width)` into a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Matrix> {
        if start + width > self.cols {
            return Err(invalid(format!(
                "column block [{start}, {}) out of range for {} columns",
                start + width,
                self.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i)
                .copy_from_slice(&self.row(i)[start..start + width]);
        }
        Ok(out)
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_column_block(&mut self, start: usize, block: &Matrix) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::ShapeMismatch {
                op: "set_column_block",
                left: self.shape(),
                right: block.shape(),
            });
        }
        for i in 0..self.rows {
            let w = block.cols;
            self.row_mut(i)[start..start + w].copy_from_slice(block.row(i));
        }
        Ok(())
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn transpose(a: &Matrix) -> Matrix {
    a.transpose()
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.hadamard(b)
}

pub fn axpy(alpha: f64, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Matrix::axpy(alpha, a, b)
}

pub fn frob_norm(a: &Matrix) -> f64 {
    a.frob_norm()
}

pub fn frob_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.frob_inner(b)
}

/// Row-wise softmax with max subtraction. With `causal_mask`, entries strictly
/// above the diagonal are excluded and come out as exactly zero.
pub fn softmax_rows(m: &Matrix, causal_mask: bool) -> Result<Matrix> {
    if causal_mask && m.rows != m.cols {
        return Err(invalid(format!(
            "causal softmax needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let valid = if causal_mask { i + 1 } else { m.cols };
        let row = &m.row(i)[..valid];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out_row = out.row_mut(i);
        let mut sum = 0.0;
        for (o, &x) in out_row.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in &mut out_row[..valid] {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of a row softmax: given `p = softmax(z)` and
/// upstream `dp`, returns `dz = p ⊙ (dp − rowsum(dp ⊙ p))`.
pub fn softmax_rows_backward(p: &Matrix, dp: &Matrix) -> Result<Matrix> {
    p.check_same_shape(dp, "softmax_rows_backward")?;
    let mut out = Matrix::zeros(p.rows, p.cols);
    for i in 0..p.rows {
        let pr = p.row(i);
        let dr = dp.row(i);
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in out.row_mut(i).iter_mut().zip(pr).zip(dr) {
            *o = pv * (dv - dot);
        }
    }
    Ok(out)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: &Matrix) -> Matrix {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_prime(x: &Matrix) -> Matrix {
    x.map(|v| {
        let s = sigmoid(v);
        s * (1.0 + v * (1.0 - s))
    })
}
