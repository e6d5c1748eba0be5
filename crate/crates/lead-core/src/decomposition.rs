//! Orthogonal subspace construction from frozen classifier weights and
//! feature decomposition into known/unknown projections.
//!
//! The classifier's row space ("known" space) and its orthogonal complement
//! ("unknown" space) come from a full SVD of the weight matrix. A normalized
//! feature then splits into two orthogonal projections whose squared
//! magnitudes sum to one; the unknown-space magnitude is the indicator this
//! whole toolkit is built around.

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{self, dot, l2_normalize, svd, LinalgError, Matrix, Vector};
use crate::synthdata::FeatureMatrix;

/// Singular values below this fraction of the largest signal a degenerate
/// classifier (duplicate or linearly dependent rows).
const RANK_DEFICIENT_EPS: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompositionError {
    #[error("classifier must be wide (classes < feature dim), got {c} x {d}")]
    DimOrder { c: usize, d: usize },
    #[error("rank-deficient classifier: singular value {value:e} below {threshold:e}")]
    RankDeficient { value: f64, threshold: f64 },
    #[error("feature dim {got} does not match basis dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("row {index}: {source}")]
    Row { index: usize, source: LinalgError },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Orthonormal bases of the classifier row space and its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    /// C rows spanning the classifier row space.
    pub v_known: Matrix,
    /// D - C rows spanning the orthogonal complement.
    pub v_unknown: Matrix,
    pub c: usize,
    pub d: usize,
}

/// One feature split into its two orthogonal projections.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedFeature {
    pub z_known: Vector,
    pub z_unknown: Vector,
    pub m_known: f64,
    pub m_unknown: f64,
}

impl DecomposedFeature {
    /// The normalized input, recovered as the sum of the two projections.
    pub fn reconstructed(&self) -> Vector {
        Vector {
            data: self
                .z_known
                .data
                .iter()
                .zip(&self.z_unknown.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

/// Builds the known/unknown subspace pair from a C-by-D classifier matrix.
///
/// Rank deficiency is an error rather than silently absorbed: with fewer
/// than C independent rows the known space's dimension would be ambiguous.
pub fn build_spaces(w_cls: &Matrix) -> Result<SubspaceBasis, DecompositionError> {
    let (c, d) = (w_cls.rows, w_cls.cols);
    if c >= d {
        return Err(DecompositionError::DimOrder { c, d });
    }
    let dec = svd(w_cls)?;
    let sigma_max = dec.sigma.data[0];
    let threshold = sigma_max * RANK_DEFICIENT_EPS;
    for &s in &dec.sigma.data {
        if s < threshold || sigma_max == 0.0 {
            return Err(DecompositionError::RankDeficient {
                value: s,
                threshold,
            });
        }
    }
    let v_known = Matrix {
        rows: c,
        cols: d,
        data: dec.vt.data[..c * d].to_vec(),
    };
    let v_unknown = Matrix {
        rows: d - c,
        cols: d,
        data: dec.vt.data[c * d..].to_vec(),
    };
    Ok(SubspaceBasis {
        v_known,
        v_unknown,
        c,
        d,
    })
}

/// Splits a feature into known/unknown projections. The input is normalized
/// first, so magnitudes satisfy `m_known^2 + m_unknown^2 = 1`.
pub fn decompose(
    z: &Vector,
    basis: &SubspaceBasis,
) -> Result<DecomposedFeature, DecompositionError> {
    if z.dim() != basis.d {
        return Err(DecompositionError::DimMismatch {
            expected: basis.d,
            got: z.dim(),
        });
    }
    let zn = l2_normalize(z)?;
    Ok(project_unit(&zn.data, basis))
}

/// Projection of an already unit-norm slice; shared by the batch path.
fn project_unit(zn: &[f64], basis: &SubspaceBasis) -> DecomposedFeature {
    let d = basis.d;
    let mut z_known = vec![0.0; d];
    let mut z_unknown = vec![0.0; d];
    for n in 0..basis.c {
        let row = basis.v_known.row(n);
        let l = dot(zn, row);
        for (acc, &v) in z_known.iter_mut().zip(row) {
            *acc += l * v;
        }
    }
    for n in 0..basis.d - basis.c {
        let row = basis.v_unknown.row(n);
        let l = dot(zn, row);
        for (acc, &v) in z_unknown.iter_mut().zip(row) {
            *acc += l * v;
        }
    }
    let m_known = linalg::norm(&z_known);
    let m_unknown = linalg::norm(&z_unknown);
    DecomposedFeature {
        z_known: Vector { data: z_known },
        z_unknown: Vector { data: z_unknown },
        m_known,
        m_unknown,
    }
}

/// Decomposes every row of a feature matrix, normalizing each row first.
/// Row-level failures carry the offending row index.
pub fn decompose_batch(
    features: &FeatureMatrix,
    basis: &SubspaceBasis,
) -> Result<Vec<DecomposedFeature>, DecompositionError> {
    if features.len() > 0 && features.dim() != basis.d {
        return Err(DecompositionError::DimMismatch {
            expected: basis.d,
            got: features.dim(),
        });
    }
    (0..features.len())
        .into_par_iter()
        .map(|i| {
            let row = features.row(i);
            let nrm = linalg::norm(row);
            if nrm < linalg::ZERO_NORM_FLOOR {
                return Err(DecompositionError::Row {
                    index: i,
                    source: LinalgError::ZeroVector {
                        floor: linalg::ZERO_NORM_FLOOR,
                    },
                });
            }
            let zn: Vec<f64> = row.iter().map(|x| x / nrm).collect();
            Ok(project_unit(&zn, basis))
        })
        .collect()
}
