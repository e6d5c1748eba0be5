//! Minimal dense linear algebra: row-major matrices, vectors, L2
//! normalization, cosine distance, and a full singular value decomposition.
//!
//! Everything here is 64-bit floating point. The SVD is a one-sided Jacobi
//! iteration applied to the smaller dimension, extended to a complete
//! orthonormal right (and left) basis by Gram-Schmidt so that null-space
//! directions are available explicitly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM_FLOOR: f64 = 1e-30;

/// Off-diagonal threshold for Jacobi convergence (relative to column norms).
const JACOBI_OFF_EPS: f64 = 1e-12;

/// Maximum number of Jacobi sweeps before giving up.
const JACOBI_MAX_SWEEPS: usize = 100;

/// Singular values below `RANK_EPS * sigma_max` get their left vectors from
/// basis completion instead of normalizing a near-zero column.
const RANK_EPS: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("non-finite value at flat index {index}")]
    NonFiniteInput { index: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("matrix is empty")]
    Empty,
    #[error("SVD did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("vector norm below {floor:e}, cannot normalize")]
    ZeroVector { floor: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
}

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, rejecting shape mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::ShapeMismatch {
                    rows: r,
                    cols: c,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`, plain triple loop. Fine at the sizes this crate uses.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimMismatch {
                left: self.cols,
                right: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product over a raw slice of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if x.len() != self.cols {
            return Err(LinalgError::DimMismatch {
                left: self.cols,
                right: x.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Dense vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    pub data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn from_slice(data: &[f64]) -> Result<Self, LinalgError> {
        Self::new(data.to_vec())
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

fn check_finite(data: &[f64]) -> Result<(), LinalgError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(LinalgError::NonFiniteInput { index }),
        None => Ok(()),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Result of a full SVD `a = u . diag(sigma) . vt`.
///
/// `u` is square over the input's rows, `vt` is square over the input's
/// columns; rows of `vt` are the right singular vectors, with rows past
/// `min(rows, cols)` spanning the null space. `sigma` is descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vector,
    pub vt: Matrix,
}

impl SvdResult {
    /// Reconstructs the original matrix from the decomposition.
    pub fn reconstruct(&self) -> Matrix {
        let m = self.u.rows;
        let n = self.vt.cols;
        let r = self.sigma.dim();
        let mut out = Matrix::zeros(m, n);
        for k in 0..r {
            let s = self.sigma.data[k];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u.get(i, k) * s;
                let vrow = self.vt.row(k);
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, &v) in dst.iter_mut().zip(vrow) {
                    *d += us * v;
                }
            }
        }
        out
    }
}

/// Full singular value decomposition of a dense matrix.
///
/// Deterministic for a fixed input: no randomness, fixed sweep order, and a
/// sign convention that makes each right singular vector's first nonzero
/// component non-negative.
pub fn svd(a: &Matrix) -> Result<SvdResult, LinalgError> {
    if a.rows == 0 || a.cols == 0 {
        return Err(LinalgError::Empty);
    }
    check_finite(&a.data)?;

    if a.rows >= a.cols {
        let (u, sigma, v) = jacobi_svd_tall(a)?;
        let mut out = SvdResult {
            u,
            sigma: Vector { data: sigma },
            vt: v.transpose(),
        };
        apply_sign_convention(&mut out);
        Ok(out)
    } else {
        // Wide input: decompose the transpose, then swap the roles of the
        // factors. The left factor of a^T holds a's right singular vectors.
        let at = a.transpose();
        let (u_t, sigma, v_t) = jacobi_svd_tall(&at)?;
        let mut out = SvdResult {
            u: v_t,
            sigma: Vector { data: sigma },
            vt: u_t.transpose(),
        };
        apply_sign_convention(&mut out);
        Ok(out)
    }
}

/// One-sided Jacobi SVD for `m >= n`: returns (full `u` m-by-m, `sigma`
/// descending of length n, `v` n-by-n).
fn jacobi_svd_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), LinalgError> {
    let m = a.rows;
    let n = a.cols;
    debug_assert!(m >= n);

    // Column-major working copies: b starts as a's columns, v as identity.
    let mut b: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut col = vec![0.0; n];
            col[j] = 1.0;
            col
        })
        .collect();

    if n > 1 {
        let mut converged = false;
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut max_off = 0.0f64;
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let (app, aqq, apq) = {
                        let (bp, bq) = (&b[p], &b[q]);
                        (dot(bp, bp), dot(bq, bq), dot(bp, bq))
                    };
                    let denom = (app * aqq).sqrt();
                    if denom <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let off = apq.abs() / denom;
                    max_off = max_off.max(off);
                    if off <= JACOBI_OFF_EPS {
                        continue;
                    }
                    let zeta = (aqq - app) / (2.0 * apq);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate_pair(&mut b, p, q, c, s);
                    rotate_pair(&mut v, p, q, c, s);
                }
            }
            if max_off <= JACOBI_OFF_EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(LinalgError::NoConvergence {
                sweeps: JACOBI_MAX_SWEEPS,
            });
        }
    }

    // Singular values and descending order (stable: ties keep column order).
    let norms: Vec<f64> = b.iter().map(|col| norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);

    // Left vectors: normalized b columns where the singular value carries
    // signal; near-zero columns are filled in by basis completion below.
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(m);
    let mut valid: Vec<Vec<f64>> = Vec::new();
    for (rank, &j) in order.iter().enumerate() {
        if sigma[rank] > sigma_max * RANK_EPS && sigma[rank] > ZERO_NORM_FLOOR {
            let col: Vec<f64> = b[j].iter().map(|x| x / sigma[rank]).collect();
            valid.push(col.clone());
            u_cols.push(Some(col));
        } else {
            u_cols.push(None);
        }
    }
    u_cols.resize(m, None);
    complete_orthonormal(&mut valid, m);
    let mut fill = valid.into_iter().skip(u_cols.iter().filter(|c| c.is_some()).count());
    for slot in u_cols.iter_mut() {
        if slot.is_none() {
            *slot = Some(fill.next().expect("orthonormal completion exhausted"));
        }
    }

    let mut u = Matrix::zeros(m, m);
    for (j, col) in u_cols.iter().enumerate() {
        for (i, &x) in col.as_ref().unwrap().iter().enumerate() {
            u.data[i * m + j] = x;
        }
    }
    let mut v_sorted = Matrix::zeros(n, n);
    for (rank, &j) in order.iter().enumerate() {
        for (i, &x) in v[j].iter().enumerate() {
            v_sorted.data[i * n + rank] = x;
        }
    }
    Ok((u, sigma, v_sorted))
}

#[inline]
fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *xp;
        let b = *xq;
        *xp = c * a - s * b;
        *xq = s * a + c * b;
    }
}

/// Extends an orthonormal set of `dim`-vectors to a full basis of `dim`
/// vectors using canonical directions, with re-orthogonalization.
fn complete_orthonormal(basis: &mut Vec<Vec<f64>>, dim: usize) {
    for i in 0..dim {
        if basis.len() == dim {
            break;
        }
        let mut r = vec![0.0; dim];
        r[i] = 1.0;
        for _ in 0..2 {
            for bvec in basis.iter() {
                let proj = dot(&r, bvec);
                for (x, &b) in r.iter_mut().zip(bvec) {
                    *x -= proj * b;
                }
            }
        }
        let nrm = norm(&r);
        if nrm > 1e-6 {
            for x in r.iter_mut() {
                *x /= nrm;
            }
            basis.push(r);
        }
    }
    assert_eq!(basis.len(), dim, "orthonormal completion fell short");
}

/// Forces each right singular vector's first nonzero component non-negative,
/// compensating in the matching `u` column so the product is unchanged.
fn apply_sign_convention(out: &mut SvdResult) {
    let n = out.vt.rows;
    let m = out.u.rows;
    let rank_dim = out.sigma.dim();
    for j in 0..n {
        let row = out.vt.row(j);
        let lead = row.iter().find(|x| x.abs() > 1e-12);
        if let Some(&x) = lead {
            if x < 0.0 {
                for k in 0..out.vt.cols {
                    let v = out.vt.get(j, k);
                    out.vt.set(j, k, -v);
                }
                if j < rank_dim {
                    for i in 0..m {
                        let v = out.u.get(i, j);
                        out.u.set(i, j, -v);
                    }
                }
            }
        }
    }
}

/// Scales a vector to unit L2 norm.
pub fn l2_normalize(v: &Vector) -> Result<Vector, LinalgError> {
    let n = v.norm();
    if n < ZERO_NORM_FLOOR {
        return Err(LinalgError::ZeroVector {
            floor: ZERO_NORM_FLOOR,
        });
    }
    Ok(Vector {
        data: v.data.iter().map(|x| x / n).collect(),
    })
}

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &Vector, b: &Vector) -> Result<f64, LinalgError> {
    if a.dim() != b.dim() {
        return Err(LinalgError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < ZERO_NORM_FLOOR || nb < ZERO_NORM_FLOOR {
        return Err(LinalgError::ZeroVector {
            floor: ZERO_NORM_FLOOR,
        });
    }
    let cos = (dot(&a.data, &b.data) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}
