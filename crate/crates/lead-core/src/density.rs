//! Two-component 1-D Gaussian mixture over unknown-space magnitudes.
//!
//! EM with deterministic percentile initialization: means start at the 25th
//! and 75th percentiles, weights equal, both variances at the sample
//! variance. The fitted components are relabeled so the lower-mean one is
//! "common" and the higher-mean one is "private".

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Variances never drop below this, preventing point-mass collapse.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Fitted means closer than this mean the magnitude distribution carries no
/// common/private separation.
const DEGENERATE_MEAN_GAP: f64 = 1e-4;

const MAX_ITERS: usize = 500;
const LL_TOLERANCE: f64 = 1e-8;
const MIN_SAMPLES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("sample {index} = {value} is outside [0, 1] or non-finite")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("fitted means separated by less than {gap:e} (pooled mean {mean}, std {std_dev}); no bimodal structure")]
    DegenerateUnimodal {
        gap: f64,
        mean: f64,
        std_dev: f64,
    },
}

/// Fitted mixture: the low-mean component models common data, the high-mean
/// component models private data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeModel {
    pub mu_com: f64,
    pub mu_pri: f64,
    pub var_com: f64,
    pub var_pri: f64,
    pub weight_com: f64,
    pub log_likelihood: f64,
    /// Log-likelihood after each EM iteration; not part of the serialized
    /// report, kept for monotonicity checks.
    #[serde(skip)]
    pub ll_trace: Vec<f64>,
}

impl MagnitudeModel {
    pub fn weight_pri(&self) -> f64 {
        1.0 - self.weight_com
    }

    /// Global-threshold ablation boundary.
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.mu_com + self.mu_pri)
    }

    /// Substitute model for unimodal magnitude distributions: boundaries are
    /// pushed to `mean + 3 std`, so (almost) everything is labeled common.
    pub fn degenerate_fallback(mean: f64, std_dev: f64) -> Self {
        let var = (std_dev * std_dev).max(VARIANCE_FLOOR);
        let ll = f64::ln(1.0 / (2.0 * std::f64::consts::PI * var).sqrt());
        Self {
            mu_com: mean,
            mu_pri: (mean + 3.0 * std_dev).min(1.0),
            var_com: var,
            var_pri: var,
            weight_com: 0.5,
            log_likelihood: ll,
            ll_trace: Vec::new(),
        }
    }
}

fn log_gaussian(x: f64, mean: f64, var: f64) -> f64 {
    let diff = x - mean;
    -0.5 * (diff * diff / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// Fits the two-component mixture by EM.
///
/// EM itself is deterministic given the percentile initialization; the seed
/// is reserved for optional random restarts, which are disabled.
pub fn fit_two_component(samples: &[f64], seed: u64) -> Result<MagnitudeModel, DensityError> {
    let _ = seed;
    if samples.len() < MIN_SAMPLES {
        return Err(DensityError::TooFewSamples {
            min: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    for (index, &value) in samples.iter().enumerate() {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(DensityError::SampleOutOfRange { index, value });
        }
    }

    let n = samples.len();
    let nf = n as f64;
    let pooled_mean = samples.iter().sum::<f64>() / nf;
    let pooled_var = samples
        .iter()
        .map(|x| (x - pooled_mean) * (x - pooled_mean))
        .sum::<f64>()
        / nf;

    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| sorted[(((n - 1) as f64) * q).round() as usize];

    let mut mu = [pick(0.25), pick(0.75)];
    let mut var = [pooled_var.max(VARIANCE_FLOOR); 2];
    let mut weight = [0.5f64; 2];

    let mut resp = vec![0.0f64; n]; // responsibility of component 1
    let mut ll_trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;

    for _ in 0..MAX_ITERS {
        // E-step in log space; magnitudes are bounded but variances can be
        // tiny, so direct densities would underflow.
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let l0 = weight[0].ln() + log_gaussian(x, mu[0], var[0]);
            let l1 = weight[1].ln() + log_gaussian(x, mu[1], var[1]);
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            resp[i] = e1 / (e0 + e1);
            ll += m + (e0 + e1).ln();
        }
        debug_assert!(
            ll >= prev_ll - 1e-10,
            "EM log-likelihood decreased: {prev_ll} -> {ll}"
        );
        ll_trace.push(ll);

        // M-step.
        let r1: f64 = resp.iter().sum();
        let r0 = nf - r1;
        if r0 > 1e-12 && r1 > 1e-12 {
            weight = [r0 / nf, r1 / nf];
            let m0 = samples
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| x * (1.0 - r))
                .sum::<f64>()
                / r0;
            let m1 = samples.iter().zip(&resp).map(|(&x, &r)| x * r).sum::<f64>() / r1;
            mu = [m0, m1];
            let v0 = samples
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| (1.0 - r) * (x - m0) * (x - m0))
                .sum::<f64>()
                / r0;
            let v1 = samples
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| r * (x - m1) * (x - m1))
                .sum::<f64>()
                / r1;
            var = [v0.max(VARIANCE_FLOOR), v1.max(VARIANCE_FLOOR)];
        }

        if (ll - prev_ll).abs() < LL_TOLERANCE {
            prev_ll = ll;
            break;
        }
        prev_ll = ll;
    }

    // Relabel so the common component has the lower mean.
    let (lo, hi) = if mu[0] <= mu[1] { (0, 1) } else { (1, 0) };
    if (mu[hi] - mu[lo]).abs() < DEGENERATE_MEAN_GAP {
        return Err(DensityError::DegenerateUnimodal {
            gap: DEGENERATE_MEAN_GAP,
            mean: pooled_mean,
            std_dev: pooled_var.sqrt(),
        });
    }
    Ok(MagnitudeModel {
        mu_com: mu[lo],
        mu_pri: mu[hi],
        var_com: var[lo],
        var_pri: var[hi],
        weight_com: weight[lo].clamp(1e-12, 1.0 - 1e-12),
        log_likelihood: prev_ll,
        ll_trace,
    })
}

/// Bayes posterior of the private (high-mean) component at `x`.
pub fn posterior_private(model: &MagnitudeModel, x: f64) -> f64 {
    let lc = model.weight_com.ln() + log_gaussian(x, model.mu_com, model.var_com);
    let lp = model.weight_pri().ln() + log_gaussian(x, model.mu_pri, model.var_pri);
    let m = lc.max(lp);
    let ec = (lc - m).exp();
    let ep = (lp - m).exp();
    ep / (ec + ep)
}
