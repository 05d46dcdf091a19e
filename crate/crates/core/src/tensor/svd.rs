//! One-sided (Hestenes) Jacobi SVD and the spectral helpers built on it.

use super::Matrix;
use crate::error::{invalid, Error, Result};

const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// Matrices with both sides at most this large use the full SVD for ‖·‖₂.
const SVD_NORM_LIMIT: usize = 256;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

/// Thin SVD `A = U · diag(sigma) · Vᵀ` with `k = min(m, n)` columns.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.truncated(self.sigma.len())
    }

    /// `U_r · diag(σ_1..σ_r) · V_rᵀ`.
    pub fn truncated(&self, r: usize) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for k in 0..r.min(self.sigma.len()) {
            let s = self.sigma[k];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u.get(i, k) * s;
                if us == 0.0 {
                    continue;
                }
                let row = out.row_mut(i);
                for (j, o) in row.iter_mut().enumerate() {
                    *o += us * self.v.get(j, k);
                }
            }
        }
        out
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(invalid("svd needs at least one row and one column"));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite(format!("svd input ({m}x{n})")));
    }
    if m < n {
        let t = jacobi_tall(&a.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    jacobi_tall(a)
}

/// One-sided Jacobi on a matrix with `m >= n`: rotate column pairs until all
/// are mutually orthogonal, accumulating the rotations into V.
fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let total = a.frob_norm_sq();
    // Columns whose squared norm falls below this are numerically zero.
    let negligible = (f64::EPSILON * f64::EPSILON) * total;

    let mut converged = total == 0.0;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[i], &cols[j]);
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= OFF_DIAGONAL_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        converged = residual <= OFF_DIAGONAL_TOL;
    }
    if !converged {
        return Err(Error::NoConvergence {
            rows: m,
            cols: n,
            sweeps,
            residual,
        });
    }

    let mut order: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (j, dot(c, c).sqrt()))
        .collect();
    // Stable sort keeps the result deterministic under ties.
    order.sort_by(|x, y| y.1.partial_cmp(&x.1).expect("finite norms"));

    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let cutoff = sigma_max * f64::EPSILON * (m.max(n) as f64);

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut u_basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (k, &(j, s)) in order.iter().enumerate() {
        for (i, &x) in vcols[j].iter().enumerate() {
            v.set(i, k, x);
        }
        if s > cutoff && s > 0.0 {
            sigma.push(s);
            let col: Vec<f64> = cols[j].iter().map(|x| x / s).collect();
            u_basis.push(col);
        } else {
            sigma.push(0.0);
            u_basis.push(Vec::new());
            pending.push(k);
        }
    }
    complete_basis(&mut u_basis, &pending, m);
    for (k, col) in u_basis.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            u.set(i, k, x);
        }
    }
    Ok(SvdResult { u, sigma, v })
}

/// Fills the `pending` slots of `basis` with unit vectors orthogonal to every
/// other column, by Gram–Schmidt over the standard basis.
fn complete_basis(basis: &mut [Vec<f64>], pending: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in pending {
        loop {
            assert!(candidate < m, "ran out of basis candidates");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, q) in basis.iter().enumerate() {
                    if k == slot || q.is_empty() {
                        continue;
                    }
                    let p = dot(&e, q);
                    for (x, y) in e.iter_mut().zip(q) {
                        *x -= p * y;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                e.iter_mut().for_each(|x| *x /= norm);
                basis[slot] = e;
                break;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Best rank-`r` approximation in Frobenius norm (truncated SVD).
pub fn low_rank_approx(a: &Matrix, r: usize) -> Result<Matrix> {
    let k = a.rows().min(a.cols());
    if r > k {
        return Err(invalid(format!(
            "rank {r} exceeds min dimension {k} of a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if r == 0 {
        return Ok(Matrix::zeros(a.rows(), a.cols()));
    }
    Ok(svd(a)?.truncated(r))
}

/// Largest singular value. Uses the full SVD up to 256 on a side and power
/// iteration on `AᵀA` beyond that.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    if a.rows() <= SVD_NORM_LIMIT && a.cols() <= SVD_NORM_LIMIT {
        return Ok(svd(a)?.sigma[0]);
    }
    power_iteration(a)
}

fn power_iteration(a: &Matrix) -> Result<f64> {
    let n = a.cols();
    let mut v = Matrix::from_fn(n, 1, |i, _| 1.0 + ((i as f64) * 0.618_033_988_75).fract());
    let norm = v.frob_norm();
    v.scale_assign(1.0 / norm);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let av = a.matmul(&v)?;
        let mut w = a.t_matmul(&av)?;
        let next = w.frob_norm();
        if next == 0.0 {
            return Ok(0.0);
        }
        w.scale_assign(1.0 / next);
        v = w;
        if (next - lambda).abs() <= POWER_TOL * next {
            return Ok(next.sqrt());
        }
        lambda = next;
    }
    Err(Error::NoConvergence {
        rows: a.rows(),
        cols: a.cols(),
        sweeps: POWER_MAX_ITERS,
        residual: lambda,
    })
}

/// `‖A‖_F² / ‖A‖₂²`.
pub fn stable_rank(a: &Matrix) -> Result<f64> {
    let fro = a.frob_norm_sq();
    if fro == 0.0 {
        return Err(invalid("stable rank of a zero matrix is undefined"));
    }
    let s1 = spectral_norm(a)?;
    Ok(fro / (s1 * s1))
}
