//! Training machinery: a small ReLU MLP feature extractor with hand-derived
//! gradients, SGD with momentum, source pretraining under smoothed
//! cross-entropy, the three adaptation losses, and the adaptation loop.
//!
//! During adaptation the classifier is frozen. Pseudo-labels, certainty
//! weights, boundaries, prototypes, mixture parameters, and consensus
//! targets are refreshed once per epoch and treated as constants within a
//! step; gradients flow through the live softmax probabilities and, for the
//! decomposition regularizer, through the projection magnitudes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::decomposition::{build_spaces, decompose_batch, DecompositionError, SubspaceBasis};
use crate::density::{fit_two_component, DensityError, MagnitudeModel};
use crate::evaluation::{evaluate, normalized_entropy, softmax};
use crate::labeling::{
    argmax_lowest, assign, assign_with_indicator, certainty, Label, LabelingError,
    PseudoLabelRecord,
};
use crate::linalg::{dot, norm, LinalgError, Matrix, Vector};
use crate::prototypes::{
    default_candidate_range, estimate_class_count, top_k_budget, PrototypeError, PrototypeSet,
};
use crate::synthdata::{DataError, FeatureMatrix, Scenario, PRIVATE_LABEL};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LEADCKPT";
const CHECKPOINT_VERSION: u16 = 1;
const LOG_FLOOR: f64 = 1e-12;

/// Batch size shared by pretraining and adaptation.
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// SGD momentum coefficient.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("instance {index} has an empty neighbor set")]
    EmptyNeighborSet { index: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Labeling(#[from] LabelingError),
    #[error(transparent)]
    Data(#[from] DataError),
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// One-hidden-layer ReLU MLP re-embedding input features.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpExtractor {
    /// `[(w1, b1), (w2, b2)]`; weights are (out x in) row-major.
    pub layers: Vec<(Matrix, Vector)>,
}

impl MlpExtractor {
    /// Seeded Xavier-uniform initialization.
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect();
            (
                Matrix {
                    rows,
                    cols,
                    data,
                },
                Vector::zeros(rows),
            )
        };
        let l1 = layer(hidden_dim, input_dim);
        let l2 = layer(output_dim, hidden_dim);
        Self {
            layers: vec![l1, l2],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].0.rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers[1].0.rows
    }

    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (w1, b1) = &self.layers[0];
        let (w2, b2) = &self.layers[1];
        let mut h_pre = vec![0.0; w1.rows];
        for (i, hp) in h_pre.iter_mut().enumerate() {
            *hp = dot(w1.row(i), x) + b1.data[i];
        }
        let h: Vec<f64> = h_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut f = vec![0.0; w2.rows];
        for (i, fv) in f.iter_mut().enumerate() {
            *fv = dot(w2.row(i), &h) + b2.data[i];
        }
        (h_pre, h, f)
    }

    /// Embedding of a single input row.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).2
    }

    /// Embeddings for every row, order preserved.
    pub fn embed_all(&self, inputs: &FeatureMatrix) -> Matrix {
        let d = self.output_dim();
        let rows: Vec<Vec<f64>> = (0..inputs.len())
            .into_par_iter()
            .map(|i| self.forward(inputs.row(i)))
            .collect();
        let mut data = Vec::with_capacity(inputs.len() * d);
        for r in rows {
            data.extend(r);
        }
        Matrix {
            rows: inputs.len(),
            cols: d,
            data,
        }
    }

    fn tensor_lens(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.data.len(), b.data.len()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| [w.data.as_mut_slice(), b.data.as_mut_slice()])
            .collect()
    }
}

/// Frozen-classifier source model: extractor plus a bias-free linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub extractor: MlpExtractor,
    pub w_cls: Matrix,
}

impl SourceModel {
    /// Hidden width defaults to twice the feature dimension.
    pub fn new(input_dim: usize, feature_dim: usize, n_classes: usize, seed: u64) -> Self {
        let extractor = MlpExtractor::new(input_dim, 2 * feature_dim, feature_dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_51F1_E12B_0DE1);
        let bound = (6.0 / (n_classes + feature_dim) as f64).sqrt();
        let data: Vec<f64> = (0..n_classes * feature_dim)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Self {
            extractor,
            w_cls: Matrix {
                rows: n_classes,
                cols: feature_dim,
                data,
            },
        }
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.w_cls.rows)
            .map(|c| dot(self.w_cls.row(c), feature))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// SGD with momentum: `v = momentum * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(tensor_lens: &[usize], learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: tensor_lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
    ) -> Result<(), ObjectiveError> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(ObjectiveError::ShapeMismatch {
                what: "optimizer tensor count",
                expected: self.velocity.len(),
                got: params.len().max(grads.len()),
            });
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(ObjectiveError::ShapeMismatch {
                    what: "optimizer tensor length",
                    expected: v.len(),
                    got: p.len(),
                });
            }
            for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Per-step or per-epoch loss breakdown; `total = lambda * l_ce + l_reg + l_con`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_reg: f64,
    pub l_con: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn total_loss(l_ce: f64, l_reg: f64, l_con: f64, lambda: f64) -> LossReport {
    LossReport {
        l_ce,
        l_reg,
        l_con,
        total: lambda * l_ce + l_reg + l_con,
        lambda,
    }
}

fn target_row(record: &PseudoLabelRecord, c: usize) -> Vec<f64> {
    match record.label {
        Label::Class(k) => {
            let mut t = vec![0.0; c];
            t[k] = 1.0;
            t
        }
        // Pseudo-private instances get a uniform target instead of an extra
        // class output.
        Label::Unknown => vec![1.0 / c as f64; c],
    }
}

/// Certainty-weighted pseudo-label cross-entropy.
pub fn loss_ce(probs: &Matrix, records: &[PseudoLabelRecord]) -> Result<f64, ObjectiveError> {
    if probs.rows != records.len() {
        return Err(ObjectiveError::ShapeMismatch {
            what: "loss_ce records",
            expected: probs.rows,
            got: records.len(),
        });
    }
    if probs.rows == 0 {
        return Ok(0.0);
    }
    let c = probs.cols;
    let mut sum = 0.0;
    for (i, rec) in records.iter().enumerate() {
        let t = target_row(rec, c);
        let row = probs.row(i);
        let mut ce = 0.0;
        for (tc, &p) in t.iter().zip(row) {
            ce -= tc * p.max(LOG_FLOOR).ln();
        }
        sum += rec.tau * ce;
    }
    Ok(sum / probs.rows as f64)
}

/// Certainty-weighted binary cross-entropy pushing magnitudes toward the
/// pseudo-label side of the decomposition.
pub fn loss_reg(
    decomposed: &[crate::decomposition::DecomposedFeature],
    records: &[PseudoLabelRecord],
) -> Result<f64, ObjectiveError> {
    if decomposed.len() != records.len() {
        return Err(ObjectiveError::ShapeMismatch {
            what: "loss_reg records",
            expected: decomposed.len(),
            got: records.len(),
        });
    }
    if decomposed.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (d, rec) in decomposed.iter().zip(records) {
        let p = sigmoid(d.m_unknown - d.m_known);
        let y = if rec.label.is_unknown() { 1.0 } else { 0.0 };
        sum -= rec.tau * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(sum / decomposed.len() as f64)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cross-entropy of each row against the mean of its neighbors' rows.
pub fn loss_con(probs: &Matrix, neighbor_sets: &[Vec<usize>]) -> Result<f64, ObjectiveError> {
    if probs.rows != neighbor_sets.len() {
        return Err(ObjectiveError::ShapeMismatch {
            what: "loss_con neighbor sets",
            expected: probs.rows,
            got: neighbor_sets.len(),
        });
    }
    if probs.rows == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, set) in neighbor_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(ObjectiveError::EmptyNeighborSet { index: i });
        }
        let target = consensus_target(probs, set);
        for (t, &p) in target.iter().zip(probs.row(i)) {
            sum -= t * p.max(LOG_FLOOR).ln();
        }
    }
    Ok(sum / probs.rows as f64)
}

fn consensus_target(probs: &Matrix, set: &[usize]) -> Vec<f64> {
    let mut target = vec![0.0; probs.cols];
    for &j in set {
        for (t, &p) in target.iter_mut().zip(probs.row(j)) {
            *t += p;
        }
    }
    for t in target.iter_mut() {
        *t /= set.len() as f64;
    }
    target
}

/// Indices of the k most cosine-similar rows per row, self excluded, ties to
/// the lower index. `k` is clamped to `n - 1`.
pub fn nearest_neighbors(embeddings: &Matrix, k: usize) -> Vec<Vec<usize>> {
    let n = embeddings.rows;
    if n < 2 {
        return vec![Vec::new(); n];
    }
    let k = k.min(n - 1);
    // Normalized copies; zero rows stay zero and tie at similarity 0.
    let normed: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row = embeddings.row(i);
            let nr = norm(row);
            if nr < crate::linalg::ZERO_NORM_FLOOR {
                row.to_vec()
            } else {
                row.iter().map(|x| x / nr).collect()
            }
        })
        .collect();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, dot(&normed[i], &normed[j])))
                .collect();
            sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            sims.truncate(k);
            sims.into_iter().map(|(j, _)| j).collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Snapshot targets for one batch: pseudo-label records and, when consensus
/// is active, the per-instance soft target rows.
pub struct BatchTargets<'a> {
    pub records: Vec<&'a PseudoLabelRecord>,
    pub consensus: Option<Vec<&'a [f64]>>,
}

struct InstanceForward {
    h_pre: Vec<f64>,
    h: Vec<f64>,
    f: Vec<f64>,
    probs: Vec<f64>,
}

fn forward_instance(extractor: &MlpExtractor, w_cls: &Matrix, x: &[f64]) -> InstanceForward {
    let (h_pre, h, f) = extractor.forward_cached(x);
    let logits: Vec<f64> = (0..w_cls.rows).map(|c| dot(w_cls.row(c), &f)).collect();
    let probs = softmax(&logits);
    InstanceForward { h_pre, h, f, probs }
}

/// Projection magnitudes of a raw (unnormalized) feature, plus the pieces
/// the gradient needs.
struct MagnitudeForward {
    m_known: f64,
    m_unknown: f64,
    q_known: Vec<f64>,
    q_unknown: Vec<f64>,
    r: f64,
}

fn magnitude_forward(basis: &SubspaceBasis, f: &[f64]) -> MagnitudeForward {
    let d = basis.d;
    let mut q_known = vec![0.0; d];
    let mut q_unknown = vec![0.0; d];
    for n in 0..basis.c {
        let row = basis.v_known.row(n);
        let l = dot(f, row);
        for (acc, &v) in q_known.iter_mut().zip(row) {
            *acc += l * v;
        }
    }
    for n in 0..basis.d - basis.c {
        let row = basis.v_unknown.row(n);
        let l = dot(f, row);
        for (acc, &v) in q_unknown.iter_mut().zip(row) {
            *acc += l * v;
        }
    }
    let r = norm(f).max(1e-300);
    MagnitudeForward {
        m_known: norm(&q_known) / r,
        m_unknown: norm(&q_unknown) / r,
        q_known,
        q_unknown,
        r,
    }
}

/// d m / d f for m = ||q|| / r with q the projection of f: the projection is
/// idempotent and symmetric, so the gradient is `(q_hat - m * f_hat) / r`.
/// Zero by convention at m = 0, where the norm is not differentiable.
fn magnitude_gradient(q: &[f64], m: f64, f: &[f64], r: f64, out: &mut [f64], coef: f64) {
    let qn = norm(q);
    if qn < 1e-300 {
        return;
    }
    for ((o, &qv), &fv) in out.iter_mut().zip(q).zip(f) {
        *o += coef * (qv / qn - m * fv / r) / r;
    }
}

fn batch_losses(
    extractor: &MlpExtractor,
    w_cls: &Matrix,
    basis: Option<&SubspaceBasis>,
    inputs: &[&[f64]],
    targets: &BatchTargets<'_>,
    lambda: f64,
) -> Result<(Vec<InstanceForward>, Vec<Option<MagnitudeForward>>, LossReport), ObjectiveError> {
    let b = inputs.len();
    if targets.records.len() != b {
        return Err(ObjectiveError::ShapeMismatch {
            what: "batch records",
            expected: b,
            got: targets.records.len(),
        });
    }
    if let Some(cons) = &targets.consensus {
        if cons.len() != b {
            return Err(ObjectiveError::ShapeMismatch {
                what: "batch consensus targets",
                expected: b,
                got: cons.len(),
            });
        }
    }
    let c = w_cls.rows;
    let mut fwd = Vec::with_capacity(b);
    let mut mags = Vec::with_capacity(b);
    let (mut ce, mut reg, mut con) = (0.0, 0.0, 0.0);
    for (i, x) in inputs.iter().enumerate() {
        let inst = forward_instance(extractor, w_cls, x);
        let rec = targets.records[i];

        let t = target_row(rec, c);
        let mut ce_i = 0.0;
        for (tc, &p) in t.iter().zip(&inst.probs) {
            ce_i -= tc * p.max(LOG_FLOOR).ln();
        }
        ce += rec.tau * ce_i;

        if let Some(basis) = basis {
            let mag = magnitude_forward(basis, &inst.f);
            let p = sigmoid(mag.m_unknown - mag.m_known);
            let y = if rec.label.is_unknown() { 1.0 } else { 0.0 };
            reg -= rec.tau * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            mags.push(Some(mag));
        } else {
            mags.push(None);
        }

        if let Some(cons) = &targets.consensus {
            for (&t, &p) in cons[i].iter().zip(&inst.probs) {
                con -= t * p.max(LOG_FLOOR).ln();
            }
        }
        fwd.push(inst);
    }
    let bf = b.max(1) as f64;
    Ok((
        fwd,
        mags,
        total_loss(ce / bf, reg / bf, con / bf, lambda),
    ))
}

/// Forward-only batch loss; the finite-difference twin of [`backward`].
pub fn batch_loss(
    extractor: &MlpExtractor,
    w_cls: &Matrix,
    basis: Option<&SubspaceBasis>,
    inputs: &[&[f64]],
    targets: &BatchTargets<'_>,
    lambda: f64,
) -> Result<LossReport, ObjectiveError> {
    batch_losses(extractor, w_cls, basis, inputs, targets, lambda).map(|(_, _, r)| r)
}

/// Analytic gradients of the total adaptation loss with respect to the
/// extractor parameters only; the classifier stays frozen. Returns gradient
/// tensors in `[w1, b1, w2, b2]` order plus the batch loss report.
pub fn backward(
    extractor: &MlpExtractor,
    w_cls: &Matrix,
    basis: Option<&SubspaceBasis>,
    inputs: &[&[f64]],
    targets: &BatchTargets<'_>,
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, LossReport), ObjectiveError> {
    let (fwd, mags, report) = batch_losses(extractor, w_cls, basis, inputs, targets, lambda)?;
    let b = inputs.len().max(1) as f64;
    let c = w_cls.rows;
    let (w1, _) = &extractor.layers[0];
    let (w2, _) = &extractor.layers[1];
    let (hd, pd, dd) = (w1.rows, w1.cols, w2.rows);

    let mut g_w1 = vec![0.0; hd * pd];
    let mut g_b1 = vec![0.0; hd];
    let mut g_w2 = vec![0.0; dd * hd];
    let mut g_b2 = vec![0.0; dd];

    for (i, x) in inputs.iter().enumerate() {
        let inst = &fwd[i];
        let rec = targets.records[i];

        // Softmax-side gradient: lambda * tau * (p - y) + (p - l).
        let t = target_row(rec, c);
        let mut d_logits = vec![0.0; c];
        for k in 0..c {
            d_logits[k] = lambda * rec.tau * (inst.probs[k] - t[k]);
        }
        if let Some(cons) = &targets.consensus {
            for k in 0..c {
                d_logits[k] += inst.probs[k] - cons[i][k];
            }
        }
        for v in d_logits.iter_mut() {
            *v /= b;
        }

        // d_f from the classifier path.
        let mut d_f = vec![0.0; dd];
        for k in 0..c {
            let dl = d_logits[k];
            if dl == 0.0 {
                continue;
            }
            for (df, &w) in d_f.iter_mut().zip(w_cls.row(k)) {
                *df += dl * w;
            }
        }

        // Decomposition regularizer path, straight into d_f.
        if let Some(mag) = &mags[i] {
            let s = sigmoid(mag.m_unknown - mag.m_known);
            let y = if rec.label.is_unknown() { 1.0 } else { 0.0 };
            let coef = rec.tau * (s - y) / b;
            magnitude_gradient(&mag.q_unknown, mag.m_unknown, &inst.f, mag.r, &mut d_f, coef);
            magnitude_gradient(&mag.q_known, mag.m_known, &inst.f, mag.r, &mut d_f, -coef);
        }

        // Layer 2.
        for r in 0..dd {
            let dfr = d_f[r];
            g_b2[r] += dfr;
            if dfr != 0.0 {
                for (g, &hv) in g_w2[r * hd..(r + 1) * hd].iter_mut().zip(&inst.h) {
                    *g += dfr * hv;
                }
            }
        }
        // ReLU mask and layer 1.
        let mut d_h = vec![0.0; hd];
        for r in 0..dd {
            let dfr = d_f[r];
            if dfr == 0.0 {
                continue;
            }
            for (dh, &w) in d_h.iter_mut().zip(w2.row(r)) {
                *dh += dfr * w;
            }
        }
        for r in 0..hd {
            if inst.h_pre[r] <= 0.0 {
                continue;
            }
            let dhr = d_h[r];
            g_b1[r] += dhr;
            if dhr != 0.0 {
                for (g, &xv) in g_w1[r * pd..(r + 1) * pd].iter_mut().zip(*x) {
                    *g += dhr * xv;
                }
            }
        }
    }
    Ok((vec![g_w1, g_b1, g_w2, g_b2], report))
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Trains extractor and classifier jointly with label-smoothed cross-entropy.
/// Returns the mean training loss per epoch.
pub fn smooth_ce_pretrain(
    model: &mut SourceModel,
    features: &FeatureMatrix,
    labels: &[usize],
    beta: f64,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, ObjectiveError> {
    let n = features.len();
    if labels.len() != n {
        return Err(ObjectiveError::ShapeMismatch {
            what: "pretrain labels",
            expected: n,
            got: labels.len(),
        });
    }
    if features.dim() != model.extractor.input_dim() {
        return Err(ObjectiveError::ShapeMismatch {
            what: "pretrain input dim",
            expected: model.extractor.input_dim(),
            got: features.dim(),
        });
    }
    let c = model.w_cls.rows;
    for &l in labels {
        if l >= c {
            return Err(ObjectiveError::LabelOutOfRange { label: l, classes: c });
        }
    }

    let mut lens = model.extractor.tensor_lens();
    lens.push(model.w_cls.data.len());
    let mut opt = OptimizerState::new(&lens, lr, DEFAULT_MOMENTUM);

    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = shuffled_indices(n, mix_seed(seed, epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(DEFAULT_BATCH_SIZE) {
            let b = chunk.len() as f64;
            let (hd, pd) = (model.extractor.hidden_dim(), model.extractor.input_dim());
            let dd = model.extractor.output_dim();
            let mut g_w1 = vec![0.0; hd * pd];
            let mut g_b1 = vec![0.0; hd];
            let mut g_w2 = vec![0.0; dd * hd];
            let mut g_b2 = vec![0.0; dd];
            let mut g_wcls = vec![0.0; c * dd];

            for &i in chunk {
                let x = features.row(i);
                let inst = forward_instance(&model.extractor, &model.w_cls, x);
                let mut loss_i = 0.0;
                let mut d_logits = vec![0.0; c];
                for k in 0..c {
                    let q = if k == labels[i] { 1.0 - beta + beta / c as f64 } else { beta / c as f64 };
                    loss_i -= q * inst.probs[k].max(LOG_FLOOR).ln();
                    d_logits[k] = (inst.probs[k] - q) / b;
                }
                loss_sum += loss_i;

                let mut d_f = vec![0.0; dd];
                for k in 0..c {
                    let dl = d_logits[k];
                    for j in 0..dd {
                        g_wcls[k * dd + j] += dl * inst.f[j];
                        d_f[j] += dl * model.w_cls.get(k, j);
                    }
                }
                for r in 0..dd {
                    let dfr = d_f[r];
                    g_b2[r] += dfr;
                    for (g, &hv) in g_w2[r * hd..(r + 1) * hd].iter_mut().zip(&inst.h) {
                        *g += dfr * hv;
                    }
                }
                let w2 = &model.extractor.layers[1].0;
                let mut d_h = vec![0.0; hd];
                for r in 0..dd {
                    let dfr = d_f[r];
                    if dfr == 0.0 {
                        continue;
                    }
                    for (dh, &w) in d_h.iter_mut().zip(w2.row(r)) {
                        *dh += dfr * w;
                    }
                }
                for r in 0..hd {
                    if inst.h_pre[r] <= 0.0 {
                        continue;
                    }
                    g_b1[r] += d_h[r];
                    for (g, &xv) in g_w1[r * pd..(r + 1) * pd].iter_mut().zip(x) {
                        *g += d_h[r] * xv;
                    }
                }
            }

            let grads = vec![g_w1, g_b1, g_w2, g_b2, g_wcls];
            let mut params = model.extractor.tensors_mut();
            params.push(model.w_cls.data.as_mut_slice());
            opt.step(&mut params, &grads)?;
        }
        epoch_losses.push(loss_sum / n as f64);
    }
    Ok(epoch_losses)
}

// ---------------------------------------------------------------------------
// Adaptation
// ---------------------------------------------------------------------------

/// How pseudo-labels are derived each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelingMode {
    /// Instance-level boundaries from common scores.
    Instance,
    /// Single global threshold at the mixture midpoint.
    Global,
    /// Instance-level boundaries with normalized entropy as the indicator.
    Entropy,
}

/// Run configuration shared by the adaptation loop and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub k_neighbors: usize,
    pub omega: f64,
    /// Candidate target class counts; `None` uses `max(2, C/2)..=2C`.
    pub candidate_class_counts: Option<Vec<usize>>,
    pub labeling_mode: LabelingMode,
    /// Ablation switches for the decomposition and consensus losses.
    pub use_reg: bool,
    pub use_con: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: 1e-3,
            momentum: DEFAULT_MOMENTUM,
            lambda: 1.0,
            alpha: crate::labeling::DEFAULT_ALPHA,
            k_neighbors: 4,
            omega: crate::evaluation::DEFAULT_OMEGA,
            candidate_class_counts: None,
            labeling_mode: LabelingMode::Instance,
            use_reg: true,
            use_con: true,
        }
    }
}

/// Everything derived from a frozen extractor over the full target set.
pub struct TargetState {
    pub embeddings: Matrix,
    pub probs: Matrix,
    pub decomposed: Vec<crate::decomposition::DecomposedFeature>,
    pub model: MagnitudeModel,
    pub prototypes: PrototypeSet,
    pub records: Vec<PseudoLabelRecord>,
}

/// Labels the whole target set once: embeddings, probabilities,
/// decomposition, mixture fit (with the unimodal fallback), prototypes, and
/// per-instance records under the requested mode.
pub fn label_target(
    extractor: &MlpExtractor,
    w_cls: &Matrix,
    basis: &SubspaceBasis,
    target: &FeatureMatrix,
    k_top: usize,
    mode: LabelingMode,
    alpha: f64,
    seed: u64,
) -> Result<TargetState, ObjectiveError> {
    let n = target.len();
    let embeddings = extractor.embed_all(target);
    let mut probs = Matrix::zeros(n, w_cls.rows);
    for i in 0..n {
        let logits: Vec<f64> = (0..w_cls.rows)
            .map(|c| dot(w_cls.row(c), embeddings.row(i)))
            .collect();
        let p = softmax(&logits);
        probs.data[i * w_cls.rows..(i + 1) * w_cls.rows].copy_from_slice(&p);
    }
    let emb_fm = FeatureMatrix {
        features: embeddings.clone(),
        labels: None,
    };
    let decomposed = decompose_batch(&emb_fm, basis)?;

    let indicator: Vec<f64> = match mode {
        LabelingMode::Instance | LabelingMode::Global => decomposed
            .iter()
            .map(|d| d.m_unknown.clamp(0.0, 1.0))
            .collect(),
        LabelingMode::Entropy => (0..n)
            .map(|i| normalized_entropy(probs.row(i)).clamp(0.0, 1.0))
            .collect(),
    };

    let model = match fit_two_component(&indicator, seed) {
        Ok(m) => m,
        Err(DensityError::DegenerateUnimodal { mean, std_dev, .. }) => {
            MagnitudeModel::degenerate_fallback(mean, std_dev)
        }
        Err(e) => return Err(e.into()),
    };
    let prototypes = PrototypeSet::build(w_cls, &probs, &embeddings, &indicator, k_top)?;

    let records: Vec<PseudoLabelRecord> = match mode {
        LabelingMode::Instance => (0..n)
            .map(|i| assign(i, &decomposed[i], &prototypes, &model, alpha))
            .collect::<Result<_, _>>()?,
        LabelingMode::Entropy => (0..n)
            .map(|i| {
                let z = decomposed[i].reconstructed();
                assign_with_indicator(i, &z, indicator[i], &prototypes, &model, alpha)
            })
            .collect::<Result<_, _>>()?,
        LabelingMode::Global => (0..n)
            .map(|i| {
                let mid = model.midpoint();
                let m = indicator[i];
                let kappa = argmax_lowest(probs.row(i));
                let label = if m >= mid { Label::Unknown } else { Label::Class(kappa) };
                PseudoLabelRecord {
                    index: i,
                    label,
                    epsilon_t: Vec::new(),
                    epsilon_s: Vec::new(),
                    epsilon: Vec::new(),
                    kappa,
                    rho: mid,
                    m_unknown: m,
                    tau: certainty(m, mid, alpha),
                }
            })
            .collect(),
    };
    Ok(TargetState {
        embeddings,
        probs,
        decomposed,
        model,
        prototypes,
        records,
    })
}

/// Per-epoch adaptation diagnostics. Pseudo-label and inference quality are
/// only present when the target carries ground-truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossReport,
    pub n_pseudo_unknown: usize,
    pub pseudo_acc_common: Option<f64>,
    pub pseudo_acc_private: Option<f64>,
    pub h_score: Option<f64>,
    pub overall_acc: Option<f64>,
}

/// Final artifacts of one adaptation run.
pub struct AdaptOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub estimated_classes: usize,
    pub final_records: Vec<PseudoLabelRecord>,
    pub final_predictions: Vec<Label>,
}

fn pseudo_quality(records: &[PseudoLabelRecord], labels: &[i32]) -> (Option<f64>, Option<f64>) {
    let (mut nc, mut hc, mut np, mut hp) = (0u64, 0u64, 0u64, 0u64);
    for (rec, &gt) in records.iter().zip(labels) {
        if gt == PRIVATE_LABEL {
            np += 1;
            if rec.label.is_unknown() {
                hp += 1;
            }
        } else {
            nc += 1;
            if rec.label == Label::Class(gt as usize) {
                hc += 1;
            }
        }
    }
    let frac = |h: u64, n: u64| (n > 0).then(|| h as f64 / n as f64);
    (frac(hc, nc), frac(hp, np))
}

fn infer_metrics(
    probs: &Matrix,
    labels: &[i32],
    omega: f64,
    scenario: Scenario,
) -> (Option<f64>, Option<f64>) {
    let preds: Vec<Label> = (0..probs.rows)
        .map(|i| {
            let row = probs.row(i);
            if normalized_entropy(row) >= omega {
                Label::Unknown
            } else {
                Label::Class(argmax_lowest(row))
            }
        })
        .collect();
    match evaluate(&preds, labels, scenario) {
        Ok(r) => (Some(r.h_score), Some(r.overall_acc)),
        Err(_) => (None, None),
    }
}

/// Adapts the extractor to an unlabeled target set against a frozen
/// classifier. Deterministic for a fixed seed and config.
pub fn adapt(
    extractor: &mut MlpExtractor,
    w_cls: &Matrix,
    target: &FeatureMatrix,
    config: &RunConfig,
) -> Result<AdaptOutcome, ObjectiveError> {
    if target.dim() != extractor.input_dim() {
        return Err(ObjectiveError::ShapeMismatch {
            what: "target input dim",
            expected: extractor.input_dim(),
            got: target.dim(),
        });
    }
    if w_cls.cols != extractor.output_dim() {
        return Err(ObjectiveError::ShapeMismatch {
            what: "classifier feature dim",
            expected: extractor.output_dim(),
            got: w_cls.cols,
        });
    }
    let n = target.len();
    let c = w_cls.rows;
    let basis = build_spaces(w_cls)?;
    let scenario = scenario_of(target);

    // The target class count is estimated once, on the initial embeddings,
    // and the top-K budget is held fixed across epochs.
    let candidates = config
        .candidate_class_counts
        .clone()
        .unwrap_or_else(|| default_candidate_range(c));
    let emb0 = FeatureMatrix {
        features: extractor.embed_all(target),
        labels: None,
    };
    let estimated_classes = match estimate_class_count(&emb0, &candidates, config.seed) {
        Ok(k) => k,
        Err(PrototypeError::SingleCluster) => c,
        Err(e) => return Err(e.into()),
    };
    let k_top = top_k_budget(n, estimated_classes);

    let mut opt = OptimizerState::new(
        &extractor.tensor_lens(),
        config.lr,
        config.momentum,
    );
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let state = label_target(
            extractor,
            w_cls,
            &basis,
            target,
            k_top,
            config.labeling_mode,
            config.alpha,
            config.seed,
        )?;
        let consensus: Option<Vec<Vec<f64>>> = if config.use_con {
            let sets = nearest_neighbors(&state.embeddings, config.k_neighbors);
            for (i, s) in sets.iter().enumerate() {
                if s.is_empty() {
                    return Err(ObjectiveError::EmptyNeighborSet { index: i });
                }
            }
            Some(
                sets.iter()
                    .map(|s| consensus_target(&state.probs, s))
                    .collect(),
            )
        } else {
            None
        };

        let (pc, pp) = match &target.labels {
            Some(l) => pseudo_quality(&state.records, l),
            None => (None, None),
        };
        let (h, oa) = match &target.labels {
            Some(l) => infer_metrics(&state.probs, l, config.omega, scenario),
            None => (None, None),
        };

        let order = shuffled_indices(n, mix_seed(config.seed, 0x5EED_0000 + epoch as u64));
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut n_batches = 0.0f64;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|&i| target.row(i)).collect();
            let targets = BatchTargets {
                records: chunk.iter().map(|&i| &state.records[i]).collect(),
                consensus: consensus
                    .as_ref()
                    .map(|cons| chunk.iter().map(|&i| cons[i].as_slice()).collect()),
            };
            let (grads, report) = backward(
                extractor,
                w_cls,
                config.use_reg.then_some(&basis),
                &inputs,
                &targets,
                config.lambda,
            )?;
            let mut params = extractor.tensors_mut();
            opt.step(&mut params, &grads)?;
            sums.0 += report.l_ce;
            sums.1 += report.l_reg;
            sums.2 += report.l_con;
            n_batches += 1.0;
        }
        let loss = total_loss(
            sums.0 / n_batches.max(1.0),
            sums.1 / n_batches.max(1.0),
            sums.2 / n_batches.max(1.0),
            config.lambda,
        );
        metrics.push(EpochMetrics {
            epoch,
            loss,
            n_pseudo_unknown: state.records.iter().filter(|r| r.label.is_unknown()).count(),
            pseudo_acc_common: pc,
            pseudo_acc_private: pp,
            h_score: h,
            overall_acc: oa,
        });
    }

    // Final labeling and inference with the adapted extractor.
    let state = label_target(
        extractor,
        w_cls,
        &basis,
        target,
        k_top,
        config.labeling_mode,
        config.alpha,
        config.seed,
    )?;
    let final_predictions: Vec<Label> = (0..n)
        .map(|i| {
            let row = state.probs.row(i);
            if normalized_entropy(row) >= config.omega {
                Label::Unknown
            } else {
                Label::Class(argmax_lowest(row))
            }
        })
        .collect();
    Ok(AdaptOutcome {
        metrics,
        estimated_classes,
        final_records: state.records,
        final_predictions,
    })
}

fn scenario_of(target: &FeatureMatrix) -> Scenario {
    match &target.labels {
        Some(l) if l.iter().any(|&x| x == PRIVATE_LABEL) => Scenario::Opda,
        _ => Scenario::Pda,
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Writes the extractor as a versioned little-endian checkpoint:
/// `LEADCKPT | version u16 | tensor count u32 | per tensor: name, dims, f64 data`.
pub fn save_checkpoint(path: &Path, extractor: &MlpExtractor) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let tensors: Vec<(String, Vec<u32>, &[f64])> = extractor
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, (wm, bv))| {
            [
                (
                    format!("layer{i}.weight"),
                    vec![wm.rows as u32, wm.cols as u32],
                    wm.data.as_slice(),
                ),
                (format!("layer{i}.bias"), vec![bv.dim() as u32], bv.data.as_slice()),
            ]
        })
        .collect();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, dims, data) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dims.len() as u8])?;
        for d in &dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<MlpExtractor, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic { expected: "LEADCKPT" });
    }
    let mut vbuf = [0u8; 2];
    read_exact(&mut r, &mut vbuf, "version")?;
    let version = u16::from_le_bytes(vbuf);
    if version != CHECKPOINT_VERSION {
        return Err(DataError::VersionUnsupported {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let mut cbuf = [0u8; 4];
    read_exact(&mut r, &mut cbuf, "tensor count")?;
    let count = u32::from_le_bytes(cbuf) as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut nlen = [0u8; 2];
        read_exact(&mut r, &mut nlen, "tensor name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(nlen) as usize];
        read_exact(&mut r, &mut name, "tensor name")?;
        let mut ndim = [0u8; 1];
        read_exact(&mut r, &mut ndim, "tensor rank")?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut dbuf = [0u8; 4];
            read_exact(&mut r, &mut dbuf, "tensor dim")?;
            dims.push(u32::from_le_bytes(dbuf) as usize);
        }
        let len: usize = dims.iter().product();
        let mut bytes = vec![0u8; len * 8];
        read_exact(&mut r, &mut bytes, "tensor data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((String::from_utf8_lossy(&name).into_owned(), dims, data));
    }

    let mut layers = Vec::new();
    let mut i = 0;
    while i + 1 < tensors.len() {
        let (_, wdims, wdata) = &tensors[i];
        let (_, bdims, bdata) = &tensors[i + 1];
        if wdims.len() != 2 || bdims.len() != 1 {
            return Err(DataError::TruncatedFile {
                what: "tensor shape header",
            });
        }
        layers.push((
            Matrix {
                rows: wdims[0],
                cols: wdims[1],
                data: wdata.clone(),
            },
            Vector {
                data: bdata.clone(),
            },
        ));
        i += 2;
    }
    Ok(MlpExtractor { layers })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), DataError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(DataError::TruncatedFile { what });
        }
        filled += n;
    }
    Ok(())
}
