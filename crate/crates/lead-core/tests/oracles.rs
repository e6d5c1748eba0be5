//! Independent-oracle checks: every derived expected value is recomputed
//! here by brute force (eigen iteration, exhaustive enumeration, finite
//! differences, ground-truth assignments) and compared to the library path.

mod common;

use common::*;
use lead_core::decomposition::{build_spaces, decompose_batch};
use lead_core::density::fit_two_component;
use lead_core::labeling::{self, Label};
use lead_core::linalg::{svd, Matrix, Vector};
use lead_core::objectives::{
    backward, batch_loss, nearest_neighbors, BatchTargets, MlpExtractor,
};
use lead_core::prototypes::{
    estimate_class_count, kmeans, per_class_mu, silhouette_score, top_k_prototypes,
};
use lead_core::synthdata::FeatureMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn fm(m: Matrix) -> FeatureMatrix {
    FeatureMatrix::new(m, None).unwrap()
}

// ---------------------------------------------------------------------------
// SVD vs Gram eigen-oracle
// ---------------------------------------------------------------------------

#[test]
fn svd_random_5x16_reconstruction_and_eigen_oracle() {
    let mut rng = seeded(42);
    let a = random_matrix(&mut rng, 5, 16);
    let r = svd(&a).unwrap();

    let rec = r.reconstruct();
    let mut err = 0.0;
    for (x, y) in rec.data.iter().zip(&a.data) {
        err += (x - y) * (x - y);
    }
    assert!(err.sqrt() / a.frobenius_norm() < 1e-8);

    let eig = symmetric_eigenvalues(&gram_ata(&a));
    let max = eig[0].max(1e-300);
    for (k, &s) in r.sigma.data.iter().enumerate() {
        assert!(
            (s * s - eig[k]).abs() / max < 1e-10,
            "sigma^2 {} vs eigenvalue {}",
            s * s,
            eig[k]
        );
    }
}

#[test]
fn svd_sweep_reconstruction_and_orthonormality() {
    // 1000 random shapes: C in [2,32], D in [C+1,128].
    let mut rng = seeded(7);
    for _ in 0..1000 {
        let c = rng.random_range(2..=32);
        let d = rng.random_range(c + 1..=128);
        let a = random_matrix(&mut rng, c, d);
        let r = svd(&a).unwrap();

        let rec = r.reconstruct();
        let mut err = 0.0;
        for (x, y) in rec.data.iter().zip(&a.data) {
            err += (x - y) * (x - y);
        }
        assert!(
            err.sqrt() / a.frobenius_norm() < 1e-8,
            "reconstruction failed at {c}x{d}"
        );

        // Rows of vt pairwise orthonormal within 1e-9.
        for i in 0..d {
            for j in i..d {
                let dot: f64 = r
                    .vt
                    .row(i)
                    .iter()
                    .zip(r.vt.row(j))
                    .map(|(x, y)| x * y)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (dot - expect).abs() < 1e-9,
                    "vt rows {i},{j} of {c}x{d}: {dot}"
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Decomposition vs scalar-projection oracle
// ---------------------------------------------------------------------------

#[test]
fn batch_magnitudes_match_projection_weight_oracle() {
    let mut rng = seeded(3);
    let w = random_matrix(&mut rng, 6, 24);
    let basis = build_spaces(&w).unwrap();
    let feats = random_matrix(&mut rng, 100, 24);
    let decs = decompose_batch(&fm(feats.clone()), &basis).unwrap();
    for (i, dec) in decs.iter().enumerate() {
        // Oracle: sum of squared dot products with each basis row.
        let row = feats.row(i);
        let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let zn: Vec<f64> = row.iter().map(|x| x / n).collect();
        let mut k2 = 0.0;
        for r in 0..basis.c {
            let l: f64 = zn.iter().zip(basis.v_known.row(r)).map(|(a, b)| a * b).sum();
            k2 += l * l;
        }
        let mut u2 = 0.0;
        for r in 0..basis.d - basis.c {
            let l: f64 = zn
                .iter()
                .zip(basis.v_unknown.row(r))
                .map(|(a, b)| a * b)
                .sum();
            u2 += l * l;
        }
        assert!((dec.m_known * dec.m_known - k2).abs() < 1e-10);
        assert!((dec.m_unknown * dec.m_unknown - u2).abs() < 1e-10);
        assert!((dec.m_known * dec.m_known + dec.m_unknown * dec.m_unknown - 1.0).abs() < 1e-6);
        // Reconstruction.
        let rec = dec.reconstructed();
        for (a, b) in rec.data.iter().zip(&zn) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn basis_invariance_under_row_mixing() {
    // The subspaces, not the rows, determine the split: decompose built from
    // W and from R*W (orthogonal R) must agree on all magnitudes.
    let mut rng = seeded(11);
    let w = random_matrix(&mut rng, 5, 17);
    let square = random_matrix(&mut rng, 5, 5);
    let rot = svd(&square).unwrap().u; // orthogonal 5x5
    let mixed = rot.matmul(&w).unwrap();

    let b1 = build_spaces(&w).unwrap();
    let b2 = build_spaces(&mixed).unwrap();
    for _ in 0..200 {
        let z = random_unit_vector(&mut rng, 17);
        let d1 = lead_core::decomposition::decompose(&Vector::new(z.clone()).unwrap(), &b1).unwrap();
        let d2 = lead_core::decomposition::decompose(&Vector::new(z).unwrap(), &b2).unwrap();
        assert!((d1.m_known - d2.m_known).abs() < 1e-8);
        assert!((d1.m_unknown - d2.m_unknown).abs() < 1e-8);
    }
}

// ---------------------------------------------------------------------------
// GMM vs ground-truth-assignment oracle
// ---------------------------------------------------------------------------

#[test]
fn gmm_recovers_bimodal_means() {
    let mut rng = seeded(21);
    let lo = Normal::new(0.3f64, 0.05).unwrap();
    let hi = Normal::new(0.7f64, 0.05).unwrap();
    let mut samples = Vec::new();
    let mut truth = Vec::new();
    for _ in 0..500 {
        samples.push(lo.sample(&mut rng).clamp(0.0, 1.0));
        truth.push(0u8);
    }
    for _ in 0..500 {
        samples.push(hi.sample(&mut rng).clamp(0.0, 1.0));
        truth.push(1u8);
    }
    // Oracle: means from the known ground-truth component assignments.
    let mean_of = |side: u8| {
        let vals: Vec<f64> = samples
            .iter()
            .zip(&truth)
            .filter(|(_, &t)| t == side)
            .map(|(&v, _)| v)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let (oracle_lo, oracle_hi) = (mean_of(0), mean_of(1));

    let model = fit_two_component(&samples, 0).unwrap();
    assert!((model.mu_com - oracle_lo).abs() < 0.02);
    assert!((model.mu_pri - oracle_hi).abs() < 0.02);
    for w in model.ll_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-10);
    }
}

// ---------------------------------------------------------------------------
// Prototypes vs exhaustive sort-and-average oracle
// ---------------------------------------------------------------------------

#[test]
fn top_k_matches_exhaustive_oracle() {
    let mut rng = seeded(33);
    let feats = random_matrix(&mut rng, 4, 3);
    // Random normalized probability rows, N=4, C=2, k=2.
    let mut pdata = Vec::new();
    for _ in 0..4 {
        let a: f64 = rng.random();
        pdata.extend([a, 1.0 - a]);
    }
    let probs = Matrix::new(4, 2, pdata).unwrap();
    let k = 2;

    let protos = top_k_prototypes(&probs, &fm(feats.clone()), k).unwrap();
    let m_unknown: Vec<f64> = (0..4).map(|i| 0.1 + 0.2 * i as f64).collect();
    let mus = per_class_mu(&probs, &m_unknown, k).unwrap();

    for c in 0..2 {
        // Oracle: enumerate all rows, sort per class, average.
        let mut idx: Vec<usize> = (0..4).collect();
        idx.sort_by(|&a, &b| {
            probs
                .get(b, c)
                .partial_cmp(&probs.get(a, c))
                .unwrap()
                .then(a.cmp(&b))
        });
        let chosen = &idx[..k];
        let mut mean = vec![0.0; 3];
        for &i in chosen {
            for (m, &x) in mean.iter_mut().zip(feats.row(i)) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= k as f64;
        }
        let n: f64 = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (p, m) in protos[c].data.iter().zip(&mean) {
            assert!((p - m / n).abs() < 1e-14);
        }
        let mu_oracle = chosen.iter().map(|&i| m_unknown[i]).sum::<f64>() / k as f64;
        assert!((mus[c] - mu_oracle).abs() < 1e-14);
    }
}

#[test]
fn top_k_permutation_equivariance() {
    let mut rng = seeded(34);
    let feats = random_matrix(&mut rng, 6, 4);
    let mut pdata = Vec::new();
    for _ in 0..6 {
        let a: f64 = rng.random();
        pdata.extend([a, 1.0 - a]);
    }
    let probs = Matrix::new(6, 2, pdata.clone()).unwrap();
    let protos = top_k_prototypes(&probs, &fm(feats.clone()), 3).unwrap();

    let perm = [4usize, 2, 0, 5, 1, 3];
    let feats_p = Matrix::from_rows(&perm.iter().map(|&i| feats.row(i).to_vec()).collect::<Vec<_>>())
        .unwrap();
    let probs_p =
        Matrix::from_rows(&perm.iter().map(|&i| probs.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
    let protos_p = top_k_prototypes(&probs_p, &fm(feats_p), 3).unwrap();
    for (a, b) in protos.iter().zip(&protos_p) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

// ---------------------------------------------------------------------------
// K-means vs exhaustive 2-partition oracle
// ---------------------------------------------------------------------------

#[test]
fn kmeans_matches_exhaustive_partition_on_two_pairs() {
    let feats = fm(Matrix::from_rows(&[
        vec![0.0, 0.0],
        vec![0.4, 0.0],
        vec![8.0, 8.0],
        vec![8.4, 8.0],
    ]
    .to_vec())
    .unwrap());

    // Oracle: best inertia over all 2-partitions of 4 points.
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << 4) - 1 {
        let (mut a, mut b): (Vec<usize>, Vec<usize>) = (vec![], vec![]);
        for i in 0..4 {
            if mask & (1 << i) != 0 {
                a.push(i);
            } else {
                b.push(i);
            }
        }
        let inertia_of = |set: &[usize]| {
            let mut c = [0.0f64; 2];
            for &i in set {
                c[0] += feats.row(i)[0];
                c[1] += feats.row(i)[1];
            }
            c[0] /= set.len() as f64;
            c[1] /= set.len() as f64;
            set.iter()
                .map(|&i| {
                    let r = feats.row(i);
                    (r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2)
                })
                .sum::<f64>()
        };
        best = best.min(inertia_of(&a) + inertia_of(&b));
    }

    let result = kmeans(&feats, 2, 5, 100).unwrap();
    assert!((result.inertia - best).abs() < 1e-12, "inertia {} vs oracle {best}", result.inertia);
}

#[test]
fn kmeans_inertia_non_increasing_over_iterations() {
    let mut rng = seeded(40);
    let feats = fm(random_matrix(&mut rng, 60, 5));
    let mut prev = f64::INFINITY;
    for iters in 1..=12 {
        let r = kmeans(&feats, 4, 9, iters).unwrap();
        assert!(
            r.inertia <= prev + 1e-9,
            "inertia rose from {prev} to {} at {iters} iterations",
            r.inertia
        );
        prev = r.inertia;
    }
}

// ---------------------------------------------------------------------------
// Silhouette oracles
// ---------------------------------------------------------------------------

#[test]
fn silhouette_hand_evaluated_four_points() {
    // Clusters {0, eps} and {10, 10+eps}: by direct evaluation of the
    // definition, every point has a = eps, b = 10 or 10+eps-side distances.
    let eps = 0.01;
    let feats = fm(Matrix::from_rows(&[
        vec![0.0],
        vec![eps],
        vec![10.0],
        vec![10.0 + eps],
    ]
    .to_vec())
    .unwrap());
    let assignments = [0usize, 0, 1, 1];
    // Point 0: a = 0.01, b = (10 + 10.01)/2 = 10.005 -> s = 1 - a/b.
    let s0 = 1.0 - 0.01 / 10.005;
    let s1 = 1.0 - 0.01 / 9.995;
    let s2 = 1.0 - 0.01 / 9.995;
    let s3 = 1.0 - 0.01 / 10.005;
    let expected = (s0 + s1 + s2 + s3) / 4.0;
    let got = silhouette_score(&feats, &assignments).unwrap();
    assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
    assert!(got > 0.9);
}

#[test]
fn silhouette_random_assignment_near_zero() {
    // Monte-Carlo over 100 random assignments of one homogeneous cloud.
    let mut rng = seeded(55);
    let feats = fm(random_matrix(&mut rng, 200, 3));
    for _ in 0..100 {
        let assignments: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        if assignments.iter().all(|&a| a == assignments[0]) {
            continue;
        }
        let s = silhouette_score(&feats, &assignments).unwrap();
        assert!(s.abs() < 0.15, "random assignment scored {s}");
    }
}

#[test]
fn silhouette_grows_with_separation() {
    let mut prev = -1.0;
    for sep in [1.0, 2.0, 4.0, 8.0, 16.0] {
        let mut rows = Vec::new();
        let mut rng = seeded(60);
        for _ in 0..30 {
            rows.push(vec![rng.random::<f64>() * 0.5, rng.random::<f64>() * 0.5]);
            rows.push(vec![sep + rng.random::<f64>() * 0.5, rng.random::<f64>() * 0.5]);
        }
        let feats = fm(Matrix::from_rows(&rows).unwrap());
        let assignments: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let s = silhouette_score(&feats, &assignments).unwrap();
        assert!(s > prev, "silhouette not monotone in separation");
        prev = s;
    }
    assert!(prev > 0.9);
}

#[test]
fn class_count_estimation_finds_three_blobs() {
    let mut rng = seeded(70);
    let centers = [[0.0, 0.0], [12.0, 0.0], [0.0, 12.0]];
    let mut rows = Vec::new();
    for c in &centers {
        for _ in 0..40 {
            rows.push(vec![
                c[0] + rng.random::<f64>() - 0.5,
                c[1] + rng.random::<f64>() - 0.5,
            ]);
        }
    }
    let feats = fm(Matrix::from_rows(&rows).unwrap());
    let picked = estimate_class_count(&feats, &[2, 3, 4, 5], 123).unwrap();
    assert_eq!(picked, 3);
}

// ---------------------------------------------------------------------------
// Labeling fixture: manual evaluation of the score/boundary formulas
// ---------------------------------------------------------------------------

#[test]
fn assign_matches_hand_spreadsheet() {
    use lead_core::density::MagnitudeModel;
    use lead_core::prototypes::PrototypeSet;

    let d = 4;
    let unit = |mut v: Vec<f64>| {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= n;
        }
        Vector::new(v).unwrap()
    };
    let prototypes = PrototypeSet {
        source_anchors: vec![unit(vec![1.0, 0.0, 0.0, 0.0]), unit(vec![0.0, 1.0, 0.0, 0.0])],
        target_prototypes: vec![
            unit(vec![0.9, 0.1, 0.1, 0.0]),
            unit(vec![0.1, 0.9, 0.0, 0.1]),
        ],
        mu_c: vec![0.30, 0.35],
        k: 2,
    };
    let model = MagnitudeModel {
        mu_com: 0.3,
        mu_pri: 0.75,
        var_com: 0.01,
        var_pri: 0.01,
        weight_com: 0.5,
        log_likelihood: 0.0,
        ll_trace: vec![],
    };

    // Six unit instances with chosen indicators.
    let zs = [
        unit(vec![1.0, 0.05, 0.1, 0.0]),
        unit(vec![0.05, 1.0, 0.0, 0.1]),
        unit(vec![0.6, 0.6, 0.2, 0.2]),
        unit(vec![0.1, 0.2, 1.0, 1.0]),
        unit(vec![1.0, 1.0, 0.0, 0.0]),
        unit(vec![0.0, 0.1, 0.9, 0.9]),
    ];
    let indicators = [0.20, 0.25, 0.40, 0.85, 0.33, 0.70];

    for (i, (z, &ind)) in zs.iter().zip(&indicators).enumerate() {
        let rec = labeling::assign_with_indicator(i, z, ind, &prototypes, &model, 1e-4).unwrap();
        // Manual evaluation: per-class scores through the closed forms.
        let mut eps = [0.0f64; 2];
        for c in 0..2 {
            let cos_t: f64 = z
                .data
                .iter()
                .zip(&prototypes.target_prototypes[c].data)
                .map(|(a, b)| a * b)
                .sum();
            let cos_s: f64 = z
                .data
                .iter()
                .zip(&prototypes.source_anchors[c].data)
                .map(|(a, b)| a * b)
                .sum();
            let d_t = 1.0 - cos_t;
            let d_s = 1.0 - cos_s;
            let e_t = (1.0 - (d_t - 1.0).exp()).clamp(0.0, 1.0);
            let e_s = (-d_s).exp().clamp(0.0, 1.0);
            eps[c] = (e_t * e_s).sqrt();
            assert!((rec.epsilon[c] - eps[c]).abs() < 1e-12);
        }
        let kappa = if eps[0] >= eps[1] { 0 } else { 1 };
        assert_eq!(rec.kappa, kappa);
        let rho = (1.0 - eps[kappa]) * prototypes.mu_c[kappa] + eps[kappa] * model.mu_pri;
        assert!((rec.rho - rho).abs() < 1e-12);
        let expect_label = if ind >= rho { Label::Unknown } else { Label::Class(kappa) };
        assert_eq!(rec.label, expect_label, "instance {i}");
        let _ = d;
    }
}

#[test]
fn certainty_large_gap_closed_form() {
    // 1 - (1 + 10^4)^(-0.50005) evaluated directly.
    let direct = 1.0 - (1.0 + 1e4f64).powf(-(1e-4 + 1.0) / 2.0);
    let got = labeling::certainty(0.0, 1.0, 1e-4);
    assert!((got - direct).abs() < 1e-15);
    assert!((1.0 - got) < 1e-2);
}

// ---------------------------------------------------------------------------
// Nearest neighbors vs brute force
// ---------------------------------------------------------------------------

#[test]
fn neighbors_match_brute_force() {
    let mut rng = seeded(80);
    let m = random_matrix(&mut rng, 10, 6);
    let sets = nearest_neighbors(&m, 4);
    for i in 0..10 {
        let norm_i: f64 = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut sims: Vec<(usize, f64)> = (0..10)
            .filter(|&j| j != i)
            .map(|j| {
                let norm_j: f64 = m.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                (j, dot / (norm_i * norm_j))
            })
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expect: Vec<usize> = sims[..4].iter().map(|&(j, _)| j).collect();
        assert_eq!(sets[i], expect, "row {i}");
    }
}

// ---------------------------------------------------------------------------
// Gradients vs central finite differences
// ---------------------------------------------------------------------------

fn gradcheck_config(seed: u64) -> f64 {
    use lead_core::labeling::PseudoLabelRecord;

    let (d_in, hidden, d, c, n) = (5, 7, 6, 3, 8);
    let extractor = MlpExtractor::new(d_in, hidden, d, seed);
    let mut rng = seeded(seed ^ 0xABCD);
    let w_cls = random_matrix(&mut rng, c, d);
    let basis = build_spaces(&w_cls).unwrap();
    let inputs_owned: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect();
    let inputs: Vec<&[f64]> = inputs_owned.iter().map(|v| v.as_slice()).collect();

    let records: Vec<PseudoLabelRecord> = (0..n)
        .map(|i| {
            let label = match i % 3 {
                0 => Label::Class(rng.random_range(0..c)),
                1 => Label::Unknown,
                _ => Label::Class(rng.random_range(0..c)),
            };
            PseudoLabelRecord {
                index: i,
                label,
                epsilon_t: vec![],
                epsilon_s: vec![],
                epsilon: vec![],
                kappa: 0,
                rho: 0.5,
                m_unknown: rng.random(),
                tau: rng.random(),
            }
        })
        .collect();
    let consensus_owned: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 0.1).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        })
        .collect();

    let lambda = 0.7;
    let targets = BatchTargets {
        records: records.iter().collect(),
        consensus: Some(consensus_owned.iter().map(|v| v.as_slice()).collect()),
    };
    let (analytic, _) =
        backward(&extractor, &w_cls, Some(&basis), &inputs, &targets, lambda).unwrap();
    let numeric = finite_diff_grads(&extractor, 1e-5, |e| {
        let targets = BatchTargets {
            records: records.iter().collect(),
            consensus: Some(consensus_owned.iter().map(|v| v.as_slice()).collect()),
        };
        batch_loss(e, &w_cls, Some(&basis), &inputs, &targets, lambda)
            .unwrap()
            .total
    });
    max_rel_error(&analytic, &numeric)
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let err = gradcheck_config(seed);
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn consensus_only_gradient_matches_finite_differences() {
    // lambda = 0 and tau = 0 reduce the loss to the consensus term alone.
    use lead_core::labeling::PseudoLabelRecord;
    let (d_in, hidden, d, c, n) = (4, 6, 5, 3, 6);
    let extractor = MlpExtractor::new(d_in, hidden, d, 77);
    let mut rng = seeded(78);
    let w_cls = random_matrix(&mut rng, c, d);
    let inputs_owned: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d_in).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect();
    let inputs: Vec<&[f64]> = inputs_owned.iter().map(|v| v.as_slice()).collect();
    let records: Vec<PseudoLabelRecord> = (0..n)
        .map(|i| PseudoLabelRecord {
            index: i,
            label: Label::Class(0),
            epsilon_t: vec![],
            epsilon_s: vec![],
            epsilon: vec![],
            kappa: 0,
            rho: 0.5,
            m_unknown: 0.5,
            tau: 0.0,
        })
        .collect();
    let consensus_owned: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 0.1).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let targets = BatchTargets {
        records: records.iter().collect(),
        consensus: Some(consensus_owned.iter().map(|v| v.as_slice()).collect()),
    };
    let (analytic, report) = backward(&extractor, &w_cls, None, &inputs, &targets, 0.0).unwrap();
    assert_eq!(report.l_ce, 0.0);
    assert_eq!(report.l_reg, 0.0);
    let numeric = finite_diff_grads(&extractor, 1e-5, |e| {
        let targets = BatchTargets {
            records: records.iter().collect(),
            consensus: Some(consensus_owned.iter().map(|v| v.as_slice()).collect()),
        };
        batch_loss(e, &w_cls, None, &inputs, &targets, 0.0).unwrap().total
    });
    let err = max_rel_error(&analytic, &numeric);
    assert!(err < 1e-4, "consensus-only max relative error {err}");
}
