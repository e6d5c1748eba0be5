//! Pseudo-labeling: common scores, instance-level decision boundaries,
//! certainty weights, and the two ablation labelers.
//!
//! For each instance the common score fuses proximity to a class's target
//! prototype and its source anchor. The score interpolates a per-instance
//! boundary between the class's magnitude mean and the private mode; the
//! unknown-space magnitude is compared against that boundary (`>=` labels
//! the instance unknown). A Student's-t-shaped weight turns the gap between
//! magnitude and boundary into a certainty in `[0, 1)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::MagnitudeModel;
use crate::linalg::{cosine_distance, LinalgError, Vector};
use crate::prototypes::PrototypeSet;

/// Default shape parameter of the certainty weight.
pub const DEFAULT_ALPHA: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelingError {
    #[error("prototype set is empty")]
    NoClasses,
    #[error("instance has {got} dims, prototypes have {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("prototype set has {protos} classes but {mus} magnitude means")]
    InconsistentPrototypes { protos: usize, mus: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A class index or the open-set "unknown" decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Unknown,
}

impl Label {
    /// File encoding: class index, or -1 for unknown.
    pub fn to_i32(self) -> i32 {
        match self {
            Label::Class(c) => c as i32,
            Label::Unknown => -1,
        }
    }

    pub fn from_i32(v: i32) -> Self {
        if v < 0 {
            Label::Unknown
        } else {
            Label::Class(v as usize)
        }
    }

    pub fn is_unknown(self) -> bool {
        matches!(self, Label::Unknown)
    }
}

/// Everything the losses need to know about one pseudo-labeled instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub index: usize,
    pub label: Label,
    pub epsilon_t: Vec<f64>,
    pub epsilon_s: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// argmax class of the fused score, ties to the lowest index.
    pub kappa: usize,
    /// Instance-level boundary evaluated at `kappa`.
    pub rho: f64,
    /// The indicator compared against `rho`: the unknown-space magnitude, or
    /// normalized entropy in the entropy ablation.
    pub m_unknown: f64,
    pub tau: f64,
}

/// Common score of one instance against one class.
///
/// Both factors are clipped to `[0, 1]` before the geometric-mean fusion. At
/// equal distances the anchor factor dominates the prototype factor:
/// proximity to a source anchor is stronger evidence of common data.
pub fn common_score(
    z: &Vector,
    c_t: &Vector,
    c_s: &Vector,
) -> Result<(f64, f64, f64), LabelingError> {
    let d_t = cosine_distance(z, c_t)?;
    let d_s = cosine_distance(z, c_s)?;
    let eps_t = (1.0 - (d_t - 1.0).exp()).clamp(0.0, 1.0);
    let eps_s = (-d_s).exp().clamp(0.0, 1.0);
    Ok((eps_t, eps_s, (eps_t * eps_s).sqrt()))
}

/// Boundary interpolation between a class magnitude mean and the private
/// mode. Exact at both endpoints.
pub fn decision_boundary(mu_c: f64, mu_pri: f64, epsilon: f64) -> f64 {
    (1.0 - epsilon) * mu_c + epsilon * mu_pri
}

/// Certainty weight in `[0, 1)`, growing with the gap between the indicator
/// and its boundary.
pub fn certainty(m_unknown: f64, rho: f64, alpha: f64) -> f64 {
    let gap = rho - m_unknown;
    1.0 - (1.0 + gap * gap / alpha).powf(-(alpha + 1.0) / 2.0)
}

/// Core assignment rule shared by the magnitude and entropy indicators.
pub fn assign_with_indicator(
    index: usize,
    z: &Vector,
    indicator: f64,
    prototypes: &PrototypeSet,
    model: &MagnitudeModel,
    alpha: f64,
) -> Result<PseudoLabelRecord, LabelingError> {
    let c = prototypes.n_classes();
    if c == 0 {
        return Err(LabelingError::NoClasses);
    }
    if prototypes.mu_c.len() != c || prototypes.target_prototypes.len() != c {
        return Err(LabelingError::InconsistentPrototypes {
            protos: prototypes.target_prototypes.len(),
            mus: prototypes.mu_c.len(),
        });
    }
    if prototypes.source_anchors[0].dim() != z.dim() {
        return Err(LabelingError::DimMismatch {
            expected: prototypes.source_anchors[0].dim(),
            got: z.dim(),
        });
    }

    let mut epsilon_t = Vec::with_capacity(c);
    let mut epsilon_s = Vec::with_capacity(c);
    let mut epsilon = Vec::with_capacity(c);
    for cls in 0..c {
        let (et, es, e) = common_score(
            z,
            &prototypes.target_prototypes[cls],
            &prototypes.source_anchors[cls],
        )?;
        epsilon_t.push(et);
        epsilon_s.push(es);
        epsilon.push(e);
    }
    let kappa = argmax_lowest(&epsilon);
    let rho = decision_boundary(prototypes.mu_c[kappa], model.mu_pri, epsilon[kappa]);
    let label = if indicator >= rho {
        Label::Unknown
    } else {
        Label::Class(kappa)
    };
    let tau = certainty(indicator, rho, alpha);
    Ok(PseudoLabelRecord {
        index,
        label,
        epsilon_t,
        epsilon_s,
        epsilon,
        kappa,
        rho,
        m_unknown: indicator,
        tau,
    })
}

/// Instance-level pseudo-labeling from a decomposed feature.
pub fn assign(
    index: usize,
    decomposed: &crate::decomposition::DecomposedFeature,
    prototypes: &PrototypeSet,
    model: &MagnitudeModel,
    alpha: f64,
) -> Result<PseudoLabelRecord, LabelingError> {
    let z = decomposed.reconstructed();
    assign_with_indicator(index, &z, decomposed.m_unknown, prototypes, model, alpha)
}

/// Global-threshold ablation: unknown iff the magnitude reaches the midpoint
/// of the two mixture means, otherwise the classifier argmax.
pub fn assign_global_threshold(
    decomposed: &crate::decomposition::DecomposedFeature,
    logits: &[f64],
    model: &MagnitudeModel,
) -> Label {
    if decomposed.m_unknown >= model.midpoint() {
        Label::Unknown
    } else {
        Label::Class(argmax_lowest(logits))
    }
}

/// Entropy-indicator ablation: the same boundary rule with normalized
/// entropy in place of the unknown-space magnitude. `model` and the
/// prototype magnitude means must have been fitted over entropies.
pub fn assign_entropy_indicator(
    index: usize,
    z: &Vector,
    normalized_entropy: f64,
    prototypes: &PrototypeSet,
    model: &MagnitudeModel,
    alpha: f64,
) -> Result<PseudoLabelRecord, LabelingError> {
    assign_with_indicator(index, z, normalized_entropy, prototypes, model, alpha)
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Serializes records in the dump format: one line per record, tab-separated
/// `index  label(-1 = unknown)  m_unknown  rho  tau`.
pub fn records_to_tsv(records: &[PseudoLabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.index,
            r.label.to_i32(),
            r.m_unknown,
            r.rho,
            r.tau
        ));
    }
    out
}
