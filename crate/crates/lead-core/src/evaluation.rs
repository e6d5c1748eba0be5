//! Scoring: H-score over common/private accuracy, normalized-entropy
//! inference, and confusion tabulation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::{argmax_lowest, Label};
use crate::synthdata::{Scenario, PRIVATE_LABEL};

/// Default normalized-entropy rejection threshold at inference time.
pub const DEFAULT_OMEGA: f64 = 0.55;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("predictions ({predictions}) and ground truth ({ground_truth}) differ in length")]
    LengthMismatch {
        predictions: usize,
        ground_truth: usize,
    },
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy of a probability row, normalized by `ln C` into `[0, 1]`.
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    let c = probs.len();
    if c < 2 {
        return 0.0;
    }
    let h: f64 = probs
        .iter()
        .map(|&p| -p * p.max(LOG_FLOOR).ln())
        .sum();
    h / (c as f64).ln()
}

/// Inference rule: reject as unknown when the normalized entropy of the
/// softmax reaches `omega`, otherwise predict the argmax class.
pub fn infer(logits: &[f64], omega: f64) -> Label {
    let probs = softmax(logits);
    if normalized_entropy(&probs) >= omega {
        Label::Unknown
    } else {
        Label::Class(argmax_lowest(logits))
    }
}

/// Harmonic mean of two accuracies; zero when either side is zero.
pub fn h_score(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Evaluation summary for one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    /// Accuracy over ground-truth-common instances (correct class required).
    pub acc_common: f64,
    /// Fraction of ground-truth-private instances predicted unknown.
    pub acc_private: f64,
    pub h_score: f64,
    /// Fraction of all instances handled correctly; the headline number for
    /// scenarios without private data.
    pub overall_acc: f64,
    /// Rows: ground-truth classes then private; columns: predicted classes
    /// then unknown.
    pub confusion: Vec<Vec<u64>>,
}

/// Scores predictions against ground truth (`-1` marks private instances).
pub fn evaluate(
    predictions: &[Label],
    ground_truth: &[i32],
    scenario: Scenario,
) -> Result<EvalReport, EvalError> {
    if predictions.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let max_class = ground_truth
        .iter()
        .filter(|&&g| g >= 0)
        .map(|&g| g as usize)
        .chain(predictions.iter().filter_map(|p| match p {
            Label::Class(c) => Some(*c),
            Label::Unknown => None,
        }))
        .max()
        .map_or(0, |m| m + 1);

    let mut confusion = vec![vec![0u64; max_class + 1]; max_class + 1];
    let (mut n_common, mut n_private) = (0u64, 0u64);
    let (mut hit_common, mut hit_private) = (0u64, 0u64);
    for (&gt, pred) in ground_truth.iter().zip(predictions) {
        let row = if gt == PRIVATE_LABEL {
            max_class
        } else {
            gt as usize
        };
        let col = match pred {
            Label::Class(c) => *c,
            Label::Unknown => max_class,
        };
        confusion[row][col] += 1;
        if gt == PRIVATE_LABEL {
            n_private += 1;
            if pred.is_unknown() {
                hit_private += 1;
            }
        } else {
            n_common += 1;
            if *pred == Label::Class(gt as usize) {
                hit_common += 1;
            }
        }
    }
    let frac = |hit: u64, n: u64| if n == 0 { 0.0 } else { hit as f64 / n as f64 };
    let acc_common = frac(hit_common, n_common);
    let acc_private = frac(hit_private, n_private);
    let total = n_common + n_private;
    Ok(EvalReport {
        scenario,
        acc_common,
        acc_private,
        h_score: h_score(acc_common, acc_private),
        overall_acc: frac(hit_common + hit_private, total),
        confusion,
    })
}

impl EvalReport {
    /// Aligned-column text rendering, confusion table included.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("scenario      {}\n", self.scenario));
        out.push_str(&format!("acc_common    {:.4}\n", self.acc_common));
        out.push_str(&format!("acc_private   {:.4}\n", self.acc_private));
        out.push_str(&format!("h_score       {:.4}\n", self.h_score));
        out.push_str(&format!("overall_acc   {:.4}\n", self.overall_acc));
        let c = self.confusion.len() - 1;
        let width = self
            .confusion
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(3);
        out.push_str("confusion (rows: truth, cols: predicted, last = unknown/private):\n");
        for (i, row) in self.confusion.iter().enumerate() {
            let name = if i == c {
                "priv".to_string()
            } else {
                format!("c{i:03}")
            };
            out.push_str(&format!("  {name:>5} |"));
            for v in row {
                out.push_str(&format!(" {v:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}
