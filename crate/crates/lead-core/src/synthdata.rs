//! Synthetic scenario generation and feature/weight file I/O.
//!
//! Scenarios are Gaussian class clusters with a controllable covariate shift
//! (seeded rotation + translation + per-axis scale) between source and
//! target. Class splits follow the common/source-private/target-private
//! structure, so partial, open-set, and open-partial setups all fall out of
//! three counts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

const FEATURE_MAGIC: &[u8; 8] = b"LEADFEAT";
const WEIGHT_MAGIC: &[u8; 8] = b"LEADWCLS";
const FORMAT_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;

/// Ground-truth label for target-private instances.
pub const PRIVATE_LABEL: i32 = -1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic bytes, not a {expected} file")]
    BadMagic { expected: &'static str },
    #[error("file truncated while reading {what}")]
    TruncatedFile { what: &'static str },
    #[error("unsupported format version {found} (supported: {supported})")]
    VersionUnsupported { found: u16, supported: u16 },
    #[error("could not place {needed} cluster centers at separation {min_sep} in dimension {dim}")]
    InfeasiblePlacement {
        needed: usize,
        min_sep: f64,
        dim: usize,
    },
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("labels length {labels} does not match row count {rows}")]
    LabelMismatch { labels: usize, rows: usize },
    #[error("csv row {row}: {msg}")]
    Csv { row: usize, msg: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which label-shift scenario a class split describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scenario {
    Pda,
    Osda,
    Opda,
    ClosedSet,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::Pda => write!(f, "PDA"),
            Scenario::Osda => write!(f, "OSDA"),
            Scenario::Opda => write!(f, "OPDA"),
            Scenario::ClosedSet => write!(f, "closed-set"),
        }
    }
}

/// Covariate-shift knobs applied to target samples of common classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub rotation_angle_scale: f64,
    pub translation_scale: f64,
    pub scale_jitter: f64,
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self {
            rotation_angle_scale: 0.0,
            translation_scale: 0.0,
            scale_jitter: 0.0,
        }
    }
}

/// Full description of one synthetic adaptation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_common: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
    pub dim_in: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn scenario(&self) -> Scenario {
        match (self.n_source_private > 0, self.n_target_private > 0) {
            (true, true) => Scenario::Opda,
            (false, true) => Scenario::Osda,
            (true, false) => Scenario::Pda,
            (false, false) => Scenario::ClosedSet,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_common == 0 {
            return Err(DataError::InvalidSpec("need at least one common class".into()));
        }
        if self.dim_in < 2 {
            return Err(DataError::InvalidSpec("dim_in must be at least 2".into()));
        }
        if self.samples_per_class == 0 {
            return Err(DataError::InvalidSpec("samples_per_class must be positive".into()));
        }
        if !(self.cluster_spread > 0.0) {
            return Err(DataError::InvalidSpec("cluster_spread must be positive".into()));
        }
        if self.shift.scale_jitter.abs() >= 2.0 {
            return Err(DataError::InvalidSpec(
                "scale_jitter must stay below 2 to keep axis scales positive".into(),
            ));
        }
        Ok(())
    }
}

/// N-by-D table of embeddings with optional ground-truth labels
/// (`-1` marks target-private instances).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub features: Matrix,
    pub labels: Option<Vec<i32>>,
}

impl FeatureMatrix {
    pub fn new(features: Matrix, labels: Option<Vec<i32>>) -> Result<Self, DataError> {
        if let Some(l) = &labels {
            if l.len() != features.rows {
                return Err(DataError::LabelMismatch {
                    labels: l.len(),
                    rows: features.rows,
                });
            }
        }
        Ok(Self { features, labels })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.features.rows
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.features.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

/// Generates one source/target pair from a scenario description.
///
/// Deterministic: the same spec always yields bit-identical matrices. All
/// values are snapped to `f32` precision so that the binary feature files
/// round-trip exactly.
pub fn generate(spec: &ScenarioSpec) -> Result<(FeatureMatrix, FeatureMatrix), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim_in;
    let spread = spec.cluster_spread;
    let radius = 10.0 * spread;
    let min_sep = 4.0 * spread;

    let n_source_classes = spec.n_common + spec.n_source_private;
    let n_centers = n_source_classes + spec.n_target_private;
    let centers = place_centers(&mut rng, n_centers, dim, radius, min_sep)?;

    // Source: common classes first, then source-private, class-major rows.
    let per = spec.samples_per_class;
    let mut src_labels = Vec::with_capacity(n_source_classes * per);
    let mut src_samples: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_source_classes);
    for class in 0..n_source_classes {
        let mut class_rows = Vec::with_capacity(per);
        for _ in 0..per {
            let row: Vec<f64> = centers[class]
                .iter()
                .map(|&c| c + spread * standard_normal(&mut rng))
                .collect();
            class_rows.push(row);
        }
        src_samples.push(class_rows);
        src_labels.extend(std::iter::repeat(class as i32).take(per));
    }

    // Covariate shift: rotation, per-axis scale, translation, all seeded.
    let rotation = random_rotation(&mut rng, dim, spec.shift.rotation_angle_scale);
    let scales: Vec<f64> = (0..dim)
        .map(|_| 1.0 + spec.shift.scale_jitter * (rng.random::<f64>() - 0.5))
        .collect();
    let translation = {
        let raw: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let mag = spec.shift.translation_scale * spread;
        raw.into_iter().map(|x| mag * x / n).collect::<Vec<f64>>()
    };

    // Target: common classes are the source clusters pushed through the
    // shift; target-private classes are fresh clusters at their own centers.
    let n_target = (spec.n_common + spec.n_target_private) * per;
    let mut tgt_vals = Vec::with_capacity(n_target * dim);
    let mut tgt_labels = Vec::with_capacity(n_target);
    for class in 0..spec.n_common {
        for row in &src_samples[class] {
            let mut y = apply_rotation(&rotation, row);
            for ((v, &s), &t) in y.iter_mut().zip(&scales).zip(&translation) {
                *v = *v * s + t;
            }
            tgt_vals.extend(y);
            tgt_labels.push(class as i32);
        }
    }
    for p in 0..spec.n_target_private {
        let center = &centers[n_source_classes + p];
        for _ in 0..per {
            for &c in center {
                tgt_vals.push(c + spread * standard_normal(&mut rng));
            }
            tgt_labels.push(PRIVATE_LABEL);
        }
    }

    // Snap to f32 precision so binary feature files round-trip bit-exactly.
    for v in tgt_vals.iter_mut() {
        *v = (*v as f32) as f64;
    }
    let mut flat_src = Vec::with_capacity(n_source_classes * per * dim);
    for class_rows in &src_samples {
        for row in class_rows {
            flat_src.extend(row.iter().map(|&v| (v as f32) as f64));
        }
    }

    let source = FeatureMatrix::new(
        Matrix::new(n_source_classes * per, dim, flat_src)?,
        Some(src_labels),
    )?;
    let target = FeatureMatrix::new(Matrix::new(n_target, dim, tgt_vals)?, Some(tgt_labels))?;
    Ok((source, target))
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn place_centers(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    radius: f64,
    min_sep: f64,
) -> Result<Vec<Vec<f64>>, DataError> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _attempt in 0..1000 {
            let raw: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
            let nrm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let cand: Vec<f64> = raw.iter().map(|x| radius * x / nrm).collect();
            let ok = centers.iter().all(|c| {
                let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= min_sep
            });
            if ok {
                centers.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::InfeasiblePlacement {
                needed: n,
                min_sep,
                dim,
            });
        }
    }
    Ok(centers)
}

/// A rotation assembled from `dim` seeded Givens rotations. Zero angle scale
/// gives the exact identity.
struct PlaneRotation {
    planes: Vec<(usize, usize, f64, f64)>, // (i, j, cos, sin)
}

fn random_rotation(rng: &mut ChaCha8Rng, dim: usize, angle_scale: f64) -> PlaneRotation {
    let mut planes = Vec::with_capacity(dim);
    for _ in 0..dim {
        let i = rng.random_range(0..dim);
        let mut j = rng.random_range(0..dim - 1);
        if j >= i {
            j += 1;
        }
        let angle = angle_scale * (rng.random::<f64>() - 0.5) * std::f64::consts::PI;
        planes.push((i.min(j), i.max(j), angle.cos(), angle.sin()));
    }
    PlaneRotation { planes }
}

fn apply_rotation(rot: &PlaneRotation, x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(i, j, c, s) in &rot.planes {
        let a = y[i];
        let b = y[j];
        y[i] = c * a - s * b;
        y[j] = s * a + c * b;
    }
    y
}

// ---------------------------------------------------------------------------
// Binary file formats (all little-endian)
// ---------------------------------------------------------------------------

fn write_u16(w: &mut impl Write, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), DataError> {
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

fn read_u16(r: &mut impl Read, what: &'static str) -> Result<u16, DataError> {
    let mut b = [0u8; 2];
    read_exact_or(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}
fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64, DataError> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, count: usize, what: &'static str) -> Result<Vec<f64>, DataError> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes a feature matrix:
/// `LEADFEAT | version u16 | flags u16 | n u64 | dim u32 | f32 values | [i32 labels]`.
pub fn write_features(path: &Path, fm: &FeatureMatrix) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    write_u16(&mut w, FORMAT_VERSION)?;
    let flags = if fm.labels.is_some() { FLAG_LABELS } else { 0 };
    write_u16(&mut w, flags)?;
    write_u64(&mut w, fm.len() as u64)?;
    write_u32(&mut w, fm.dim() as u32)?;
    for &v in &fm.features.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    if let Some(labels) = &fm.labels {
        for &l in labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(DataError::BadMagic { expected: "LEADFEAT" });
    }
    let version = read_u16(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::VersionUnsupported {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let flags = read_u16(&mut r, "flags")?;
    let n = read_u64(&mut r, "row count")? as usize;
    let dim = read_u32(&mut r, "dim")? as usize;
    let values = read_f32s(&mut r, n * dim, "feature values")?;
    let labels = if flags & FLAG_LABELS != 0 {
        let mut bytes = vec![0u8; n * 4];
        read_exact_or(&mut r, &mut bytes, "labels")?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    } else {
        None
    };
    Ok(FeatureMatrix::new(Matrix::new(n, dim, values)?, labels)?)
}

/// Writes a classifier weight matrix:
/// `LEADWCLS | version u16 | C u32 | D u32 | f32 values`.
pub fn write_weights(path: &Path, w_cls: &Matrix) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHT_MAGIC)?;
    write_u16(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, w_cls.rows as u32)?;
    write_u32(&mut w, w_cls.cols as u32)?;
    for &v in &w_cls.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Matrix, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != WEIGHT_MAGIC {
        return Err(DataError::BadMagic { expected: "LEADWCLS" });
    }
    let version = read_u16(&mut r, "version")?;
    if version != FORMAT_VERSION {
        return Err(DataError::VersionUnsupported {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let c = read_u32(&mut r, "class count")? as usize;
    let d = read_u32(&mut r, "feature dim")? as usize;
    let values = read_f32s(&mut r, c * d, "weight values")?;
    Ok(Matrix::new(c, d, values)?)
}

/// Reads features from a plain CSV of floats, one instance per row. With
/// `has_labels`, the last column is parsed as an integer label.
pub fn read_features_csv(path: &Path, has_labels: bool) -> Result<FeatureMatrix, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    let mut rows = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let n_feat = if has_labels {
            fields.len().saturating_sub(1)
        } else {
            fields.len()
        };
        match dim {
            None => dim = Some(n_feat),
            Some(d) if d != n_feat => {
                return Err(DataError::Csv {
                    row: idx + 1,
                    msg: format!("expected {d} feature columns, found {n_feat}"),
                })
            }
            _ => {}
        }
        for f in &fields[..n_feat] {
            let v: f64 = f.parse().map_err(|e| DataError::Csv {
                row: idx + 1,
                msg: format!("bad float {f:?}: {e}"),
            })?;
            values.push(v);
        }
        if has_labels {
            let l: i32 = fields[n_feat].parse().map_err(|e| DataError::Csv {
                row: idx + 1,
                msg: format!("bad label {:?}: {e}", fields[n_feat]),
            })?;
            labels.push(l);
        }
        rows += 1;
    }
    let dim = dim.unwrap_or(0);
    Ok(FeatureMatrix::new(
        Matrix::new(rows, dim, values)?,
        has_labels.then_some(labels),
    )?)
}
