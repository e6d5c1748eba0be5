//! Class representatives and target class-count estimation.
//!
//! Source anchors are the normalized classifier rows. Target prototypes are
//! built by top-K sampling: for each class, the K instances with the highest
//! softmax probability are averaged and normalized. The same index sets give
//! per-class means of the unknown-space magnitude. K-means plus the
//! silhouette statistic estimate how many classes the target actually has.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{self, Matrix, Vector};
use crate::synthdata::FeatureMatrix;

/// Silhouette computations subsample beyond this many points; the statistic
/// is quadratic in the sample count.
pub const SILHOUETTE_MAX_POINTS: usize = 2000;

/// Lloyd iteration cap used when callers do not pick their own budget.
pub const DEFAULT_KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrototypeError {
    #[error("row {row} of the weight matrix has zero norm")]
    ZeroRow { row: usize },
    #[error("class {class} top-{k} mean collapsed to the zero vector")]
    ZeroPrototype { class: usize, k: usize },
    #[error("k = {k} exceeds the {n} available instances")]
    KTooLarge { k: usize, n: usize },
    #[error("k = {k} is not a valid cluster/sample count")]
    InvalidK { k: usize },
    #[error("probability row {row} sums to {sum}, expected 1")]
    ProbRowNotNormalized { row: usize, sum: f64 },
    #[error("lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("fewer than two non-empty clusters")]
    SingleCluster,
    #[error("no candidate class counts supplied")]
    NoCandidates,
}

/// Per-class representatives plus the sampling budget that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub source_anchors: Vec<Vector>,
    pub target_prototypes: Vec<Vector>,
    /// Per-class mean of the unknown-space magnitude over the top-K set.
    pub mu_c: Vec<f64>,
    pub k: usize,
}

impl PrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.source_anchors.len()
    }

    /// Assembles the full set from classifier weights, softmax outputs, the
    /// embedding matrix, and per-instance indicator magnitudes.
    pub fn build(
        w_cls: &Matrix,
        probs: &Matrix,
        embeddings: &Matrix,
        indicator: &[f64],
        k: usize,
    ) -> Result<Self, PrototypeError> {
        let fm = FeatureMatrix {
            features: embeddings.clone(),
            labels: None,
        };
        Ok(Self {
            source_anchors: source_anchors(w_cls)?,
            target_prototypes: top_k_prototypes(probs, &fm, k)?,
            mu_c: per_class_mu(probs, indicator, k)?,
            k,
        })
    }
}

/// K-means output: assignments, centroids, sum of squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vector>,
    pub inertia: f64,
}

/// Normalized classifier rows, one anchor per class.
pub fn source_anchors(w_cls: &Matrix) -> Result<Vec<Vector>, PrototypeError> {
    (0..w_cls.rows)
        .map(|i| {
            let row = w_cls.row(i);
            let n = linalg::norm(row);
            if n < linalg::ZERO_NORM_FLOOR {
                return Err(PrototypeError::ZeroRow { row: i });
            }
            Ok(Vector {
                data: row.iter().map(|x| x / n).collect(),
            })
        })
        .collect()
}

/// Indices of the k rows with the largest probability per class; ties break
/// toward the lower row index.
fn top_k_indices(probs: &Matrix, k: usize) -> Result<Vec<Vec<usize>>, PrototypeError> {
    let n = probs.rows;
    if k == 0 {
        return Err(PrototypeError::InvalidK { k });
    }
    if k > n {
        return Err(PrototypeError::KTooLarge { k, n });
    }
    for i in 0..n {
        let sum: f64 = probs.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(PrototypeError::ProbRowNotNormalized { row: i, sum });
        }
    }
    let mut out = Vec::with_capacity(probs.cols);
    for c in 0..probs.cols {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            probs
                .get(b, c)
                .partial_cmp(&probs.get(a, c))
                .unwrap()
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        out.push(idx);
    }
    Ok(out)
}

/// Per-class mean of the top-K most confident feature rows, L2-normalized.
pub fn top_k_prototypes(
    probs: &Matrix,
    features: &FeatureMatrix,
    k: usize,
) -> Result<Vec<Vector>, PrototypeError> {
    if probs.rows != features.len() {
        return Err(PrototypeError::LengthMismatch {
            left: probs.rows,
            right: features.len(),
        });
    }
    let sets = top_k_indices(probs, k)?;
    let d = features.dim();
    sets.iter()
        .enumerate()
        .map(|(class, set)| {
            let mut mean = vec![0.0; d];
            for &i in set {
                for (m, &x) in mean.iter_mut().zip(features.row(i)) {
                    *m += x;
                }
            }
            for m in mean.iter_mut() {
                *m /= set.len() as f64;
            }
            let n = linalg::norm(&mean);
            if n < linalg::ZERO_NORM_FLOOR {
                return Err(PrototypeError::ZeroPrototype { class, k });
            }
            Ok(Vector {
                data: mean.into_iter().map(|x| x / n).collect(),
            })
        })
        .collect()
}

/// Per-class mean of an indicator value over each class's top-K index set.
pub fn per_class_mu(
    probs: &Matrix,
    indicator: &[f64],
    k: usize,
) -> Result<Vec<f64>, PrototypeError> {
    if probs.rows != indicator.len() {
        return Err(PrototypeError::LengthMismatch {
            left: probs.rows,
            right: indicator.len(),
        });
    }
    let sets = top_k_indices(probs, k)?;
    Ok(sets
        .iter()
        .map(|set| set.iter().map(|&i| indicator[i]).sum::<f64>() / set.len() as f64)
        .collect())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with k-means++ seeding driven by a seeded generator.
/// Runs to an assignment fixpoint or `max_iter`, whichever comes first;
/// empty clusters are re-seeded to the point farthest from its centroid.
pub fn kmeans(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterResult, PrototypeError> {
    let n = features.len();
    if k < 2 {
        return Err(PrototypeError::InvalidK { k });
    }
    if k > n {
        return Err(PrototypeError::KTooLarge { k, n });
    }
    let d = features.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(features.row(rng.random_range(0..n)).to_vec());
    let mut dists: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dists.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dists.iter().enumerate() {
                r -= w;
                if r <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(features.row(next).to_vec());
        let newest = centroids.last().unwrap();
        for (i, dv) in dists.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(features.row(i), newest));
        }
    }

    let assign = |centroids: &[Vec<f64>]| -> Vec<usize> {
        (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(features.row(i), centroids).0)
            .collect()
    };

    let mut assignments = assign(&centroids);
    for _ in 0..max_iter {
        // Update step: mean of members, accumulated in row order.
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
        }
        // Re-seed empty clusters to the farthest point, lowest index on ties.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, sq_dist(features.row(i), &centroids[assignments[i]])))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[c] = features.row(far).to_vec();
            }
        }

        let next = assign(&centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }

    let inertia = (0..n)
        .map(|i| sq_dist(features.row(i), &centroids[assignments[i]]))
        .sum();
    Ok(ClusterResult {
        assignments,
        centroids: centroids
            .into_iter()
            .map(|data| Vector { data })
            .collect(),
        inertia,
    })
}

fn silhouette_of_subset(
    features: &FeatureMatrix,
    assignments: &[usize],
    subset: &[usize],
) -> Result<f64, PrototypeError> {
    let n_clusters = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_clusters];
    for &i in subset {
        sizes[assignments[i]] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(PrototypeError::SingleCluster);
    }

    let scores: Vec<f64> = subset
        .par_iter()
        .map(|&i| {
            let own = assignments[i];
            if sizes[own] <= 1 {
                return 0.0; // singleton convention
            }
            let mut sums = vec![0.0f64; n_clusters];
            for &j in subset {
                if j == i {
                    continue;
                }
                sums[assignments[j]] += sq_dist(features.row(i), features.row(j)).sqrt();
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..n_clusters)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom <= 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean silhouette over all points, Euclidean distance, exact.
pub fn silhouette_score(
    features: &FeatureMatrix,
    assignments: &[usize],
) -> Result<f64, PrototypeError> {
    if features.len() != assignments.len() {
        return Err(PrototypeError::LengthMismatch {
            left: features.len(),
            right: assignments.len(),
        });
    }
    let subset: Vec<usize> = (0..features.len()).collect();
    silhouette_of_subset(features, assignments, &subset)
}

/// Silhouette on a seeded subsample of at most `max_points` points; exact
/// below that size.
pub fn silhouette_score_sampled(
    features: &FeatureMatrix,
    assignments: &[usize],
    max_points: usize,
    seed: u64,
) -> Result<f64, PrototypeError> {
    if features.len() != assignments.len() {
        return Err(PrototypeError::LengthMismatch {
            left: features.len(),
            right: assignments.len(),
        });
    }
    let n = features.len();
    if n <= max_points {
        return silhouette_score(features, assignments);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..max_points {
        let j = i + rng.random_range(0..n - i);
        idx.swap(i, j);
    }
    let mut subset = idx[..max_points].to_vec();
    subset.sort_unstable();
    silhouette_of_subset(features, assignments, &subset)
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 keeps per-candidate streams independent of ordering.
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs K-means for every candidate count and returns the one with the best
/// (sampled) silhouette; ties go to the smaller candidate.
pub fn estimate_class_count(
    features: &FeatureMatrix,
    candidates: &[usize],
    seed: u64,
) -> Result<usize, PrototypeError> {
    estimate_class_count_budgeted(features, candidates, seed, DEFAULT_KMEANS_MAX_ITER)
}

/// Same as [`estimate_class_count`] with an explicit Lloyd iteration cap,
/// for callers timing large inputs.
pub fn estimate_class_count_budgeted(
    features: &FeatureMatrix,
    candidates: &[usize],
    seed: u64,
    max_iter: usize,
) -> Result<usize, PrototypeError> {
    if candidates.is_empty() {
        return Err(PrototypeError::NoCandidates);
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(usize, f64)> = None;
    for &cand in &sorted {
        let cand_seed = derive_seed(seed, cand as u64);
        let result = kmeans(features, cand, cand_seed, max_iter)?;
        let score = silhouette_score_sampled(
            features,
            &result.assignments,
            SILHOUETTE_MAX_POINTS,
            cand_seed,
        )?;
        // Strict > with ascending candidates: equal scores keep the smaller.
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((cand, score));
        }
    }
    Ok(best.unwrap().0)
}

/// Default candidate range for the estimated target class count given C
/// source classes: `max(2, C/2)..=2C`.
pub fn default_candidate_range(n_source_classes: usize) -> Vec<usize> {
    let lo = (n_source_classes / 2).max(2);
    let hi = (2 * n_source_classes).max(lo);
    (lo..=hi).collect()
}

/// Top-K sampling budget `K = floor(N / C_hat)` clamped to `[1, N]`.
pub fn top_k_budget(n_target: usize, estimated_classes: usize) -> usize {
    (n_target / estimated_classes.max(1)).clamp(1, n_target.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        FeatureMatrix::new(Matrix::from_rows(&rows).unwrap(), None).unwrap()
    }

    #[test]
    fn anchors_are_normalized_rows() {
        let w = Matrix::new(2, 3, vec![3.0, 4.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let a = source_anchors(&w).unwrap();
        assert_eq!(a[0].data, vec![0.6, 0.8, 0.0]);
        assert_eq!(a[1].data, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_anchor_row_errors() {
        let w = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            source_anchors(&w),
            Err(PrototypeError::ZeroRow { row: 1 })
        ));
    }

    #[test]
    fn two_axes_average_to_diagonal() {
        let features = fm(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let probs = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let protos = top_k_prototypes(&probs, &features, 2).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((protos[0].data[0] - s).abs() < 1e-15);
        assert!((protos[0].data[1] - s).abs() < 1e-15);
    }

    #[test]
    fn k1_picks_most_confident_row() {
        let features = fm(vec![vec![2.0, 0.0], vec![0.0, 5.0]]);
        let probs = Matrix::new(2, 2, vec![0.2, 0.8, 1.0, 0.0]).unwrap();
        let protos = top_k_prototypes(&probs, &features, 1).unwrap();
        // class 0: row 1 has prob 1.0; class 1: row 0 has prob 0.8.
        assert_eq!(protos[0].data, vec![0.0, 1.0]);
        assert_eq!(protos[1].data, vec![1.0, 0.0]);
    }

    #[test]
    fn prob_row_validation() {
        let features = fm(vec![vec![1.0, 0.0]]);
        let probs = Matrix::new(1, 2, vec![0.7, 0.7]).unwrap();
        assert!(matches!(
            top_k_prototypes(&probs, &features, 1),
            Err(PrototypeError::ProbRowNotNormalized { row: 0, .. })
        ));
        let probs_ok = Matrix::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            top_k_prototypes(&probs_ok, &features, 2),
            Err(PrototypeError::KTooLarge { k: 2, n: 1 })
        ));
    }

    #[test]
    fn mu_constant_field() {
        let probs = Matrix::new(4, 2, vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7]).unwrap();
        let mu = per_class_mu(&probs, &[0.4; 4], 2).unwrap();
        assert_eq!(mu, vec![0.4, 0.4]);
    }

    #[test]
    fn mu_full_population_is_global_mean() {
        let probs = Matrix::new(4, 2, vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7]).unwrap();
        let vals = [0.1, 0.2, 0.3, 0.8];
        let mu = per_class_mu(&probs, &vals, 4).unwrap();
        let mean = vals.iter().sum::<f64>() / 4.0;
        assert!((mu[0] - mean).abs() < 1e-15);
        assert!((mu[1] - mean).abs() < 1e-15);
    }

    #[test]
    fn kmeans_identical_points_zero_inertia() {
        let features = fm(vec![vec![1.0, 1.0]; 6]);
        let r = kmeans(&features, 2, 3, 50).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn kmeans_k_equals_n() {
        let features = fm(vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![5.0, 5.0],
        ]);
        let r = kmeans(&features, 4, 1, 100).unwrap();
        assert!(r.inertia < 1e-24);
        let mut seen = r.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let features = fm(vec![vec![0.0], vec![1.0]]);
        assert!(matches!(
            kmeans(&features, 1, 0, 10),
            Err(PrototypeError::InvalidK { k: 1 })
        ));
        assert!(matches!(
            kmeans(&features, 3, 0, 10),
            Err(PrototypeError::KTooLarge { k: 3, n: 2 })
        ));
    }

    #[test]
    fn silhouette_two_tight_clusters() {
        let features = fm(vec![
            vec![0.0],
            vec![0.01],
            vec![10.0],
            vec![10.01],
        ]);
        let s = silhouette_score(&features, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.99, "got {s}");
    }

    #[test]
    fn silhouette_singleton_convention() {
        let features = fm(vec![vec![0.0], vec![1.0]]);
        let s = silhouette_score(&features, &[0, 1]).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn silhouette_single_cluster_errors() {
        let features = fm(vec![vec![0.0], vec![1.0]]);
        assert!(matches!(
            silhouette_score(&features, &[0, 0]),
            Err(PrototypeError::SingleCluster)
        ));
    }

    #[test]
    fn candidate_range_default() {
        assert_eq!(default_candidate_range(4), vec![2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(default_candidate_range(2), vec![2, 3, 4]);
    }

    #[test]
    fn top_k_budget_clamps() {
        assert_eq!(top_k_budget(100, 7), 14);
        assert_eq!(top_k_budget(5, 100), 1);
        assert_eq!(top_k_budget(10, 1), 10);
    }

    #[test]
    fn single_candidate_wins() {
        let mut rows = Vec::new();
        for i in 0..10 {
            rows.push(vec![i as f64 * 0.01, 0.0]);
            rows.push(vec![5.0 + i as f64 * 0.01, 5.0]);
        }
        let features = fm(rows);
        assert_eq!(estimate_class_count(&features, &[2], 9).unwrap(), 2);
    }
}
