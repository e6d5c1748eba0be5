//! Shared oracles for the integration and acceptance suites. Everything in
//! here is deliberately independent of the library's own numerical paths.
#![allow(dead_code)]

use lead_core::linalg::Matrix;
use lead_core::objectives::MlpExtractor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Eigenvalues of a symmetric matrix by the classical two-sided Jacobi
/// iteration, descending. Independent of the library's one-sided SVD.
pub fn symmetric_eigenvalues(g: &Matrix) -> Vec<f64> {
    assert_eq!(g.rows, g.cols);
    let n = g.rows;
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| g.row(i).to_vec()).collect();
    let scale = a
        .iter()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(1e-300);
    for _sweep in 0..200 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a[p][q].abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // Two-sided rotation on rows and columns p, q.
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    eig
}

/// Gram matrix `a^T a`.
pub fn gram_ata(a: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(a.cols, a.cols);
    for i in 0..a.cols {
        for j in 0..a.cols {
            let mut s = 0.0;
            for k in 0..a.rows {
                s += a.get(k, i) * a.get(k, j);
            }
            g.set(i, j, s);
        }
    }
    g
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    Matrix { rows, cols, data }
}

pub fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite differences of a scalar loss over every extractor
/// parameter, in the same `[w1, b1, w2, b2]` tensor order as `backward`.
pub fn finite_diff_grads<F>(extractor: &MlpExtractor, h: f64, mut eval: F) -> Vec<Vec<f64>>
where
    F: FnMut(&MlpExtractor) -> f64,
{
    let mut grads = Vec::new();
    for layer in 0..extractor.layers.len() {
        for tensor in 0..2 {
            let len = if tensor == 0 {
                extractor.layers[layer].0.data.len()
            } else {
                extractor.layers[layer].1.data.len()
            };
            let mut g = vec![0.0; len];
            for i in 0..len {
                let mut plus = extractor.clone();
                let mut minus = extractor.clone();
                {
                    let t = if tensor == 0 {
                        &mut plus.layers[layer].0.data
                    } else {
                        &mut plus.layers[layer].1.data
                    };
                    t[i] += h;
                }
                {
                    let t = if tensor == 0 {
                        &mut minus.layers[layer].0.data
                    } else {
                        &mut minus.layers[layer].1.data
                    };
                    t[i] -= h;
                }
                g[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            grads.push(g);
        }
    }
    grads
}

/// Largest elementwise relative discrepancy, floored denominator.
pub fn max_rel_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, b) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), b.len());
        for (&x, &y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}
