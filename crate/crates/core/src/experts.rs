//! Per-recording-type experts: a one-hidden-layer ReLU network over pooled
//! MFCC statistics, the detection→classification warm start, and the reader
//! for externally computed predictions.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RecordingType;
use crate::util::rng_from;

const MODEL_MAGIC: &[u8; 4] = b"VKEM";
const MODEL_VERSION: u32 = 1;
pub const BUILTIN_TAG: &str = "builtin";
pub const WARM_START_SUFFIX: &str = "+warmstart:detection";

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("training labels need at least two classes with two examples each ({0})")]
    DegenerateLabels(String),
    #[error("non-finite feature value in row {row}")]
    NonFiniteFeatures { row: usize },
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature config {got} does not match the model's {expected}")]
    IncompatibleFeatureConfig { expected: String, got: String },
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("line {line}: class names {got:?} differ from {expected:?}")]
    InconsistentClassNames { line: usize, expected: Vec<String>, got: Vec<String> },
    #[error("line {line}: probabilities sum to {sum}")]
    UnnormalizedBeyondTolerance { line: usize, sum: f64 },
    #[error("model file {path}: {message}")]
    ModelFile { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    pub hidden_units: usize,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 200,
            l2: 1e-4,
            seed: 0,
            hidden_units: 64,
            init_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ExpertError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ExpertError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.l2 < 0.0 || self.hidden_units == 0 {
            return Err(ExpertError::InvalidConfig("momentum in [0,1), l2 ≥ 0, hidden_units > 0".into()));
        }
        Ok(())
    }
}

/// A trained (or freshly initialised) expert. Weight matrices are row-major:
/// `w1` is hidden × input, `w2` is classes × hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub expert_id: String,
    /// `None` for a pooled expert trained on every recording type.
    pub recording_type: Option<RecordingType>,
    pub feature_hash: String,
    pub class_names: Vec<String>,
    pub provenance_tag: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub expert_id: String,
    pub probs: Vec<f64>,
    pub class_names: Vec<String>,
}

impl Prediction {
    pub fn prob_of(&self, class: &str) -> Option<f64> {
        self.class_names.iter().position(|c| c == class).map(|i| self.probs[i])
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    // First maximum wins so ties resolve to the earlier class.
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct Forward {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl ExpertModel {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    fn init_layer(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
        let bound = scale * (6.0 / cols as f64).sqrt();
        (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect()
    }

    /// Random weights, identity standardisation.
    pub fn initialise(
        expert_id: &str,
        recording_type: Option<RecordingType>,
        feature_hash: &str,
        class_names: &[String],
        input_dim: usize,
        cfg: &TrainConfig,
    ) -> Self {
        let mut rng = rng_from(cfg.seed, &["init", expert_id]);
        let h = cfg.hidden_units;
        let k = class_names.len();
        ExpertModel {
            expert_id: expert_id.to_string(),
            recording_type,
            feature_hash: feature_hash.to_string(),
            class_names: class_names.to_vec(),
            provenance_tag: BUILTIN_TAG.to_string(),
            input_dim,
            hidden: h,
            mean: vec![0.0; input_dim],
            std: vec![1.0; input_dim],
            w1: Self::init_layer(&mut rng, h, input_dim, cfg.init_scale),
            b1: vec![0.0; h],
            w2: Self::init_layer(&mut rng, k, h, cfg.init_scale),
            b2: vec![0.0; k],
        }
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn forward_std(&self, z: &[f64]) -> Forward {
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
                (self.b1[j] + row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()).max(0.0)
            })
            .collect();
        let logits: Vec<f64> = (0..self.n_classes())
            .map(|c| {
                let row = &self.w2[c * self.hidden..(c + 1) * self.hidden];
                self.b2[c] + row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect();
        Forward { hidden, probs: softmax(&logits) }
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ExpertError> {
        if x.len() != self.input_dim {
            return Err(ExpertError::DimensionMismatch { expected: self.input_dim, got: x.len() });
        }
        Ok(())
    }

    /// ReLU activations of the hidden layer.
    pub fn hidden_activations(&self, x: &[f64]) -> Result<Vec<f64>, ExpertError> {
        self.check_dim(x)?;
        Ok(self.forward_std(&self.standardize(x)).hidden)
    }

    pub fn predict(&self, clip_id: &str, x: &[f64]) -> Result<Prediction, ExpertError> {
        self.check_dim(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ExpertError::NonFiniteFeatures { row: 0 });
        }
        Ok(Prediction {
            clip_id: clip_id.to_string(),
            expert_id: self.expert_id.clone(),
            probs: self.forward_std(&self.standardize(x)).probs,
            class_names: self.class_names.clone(),
        })
    }

    /// Mean cross-entropy plus `0.5·l2·‖W‖²` on already standardised rows.
    fn loss_std(&self, z: &[Vec<f64>], y: &[usize], l2: f64) -> f64 {
        let ce: f64 =
            z.iter().zip(y).map(|(row, &t)| -self.forward_std(row).probs[t].max(f64::MIN_POSITIVE).ln()).sum::<f64>()
                / z.len() as f64;
        ce + 0.5 * l2 * (sq_norm(&self.w1) + sq_norm(&self.w2))
    }

    /// Analytic gradient in parameter order (w1, b1, w2, b2).
    fn gradient_std(&self, z: &[Vec<f64>], y: &[usize], l2: f64) -> Vec<f64> {
        let (d, h, k) = (self.input_dim, self.hidden, self.n_classes());
        let mut gw1 = vec![0.0; h * d];
        let mut gb1 = vec![0.0; h];
        let mut gw2 = vec![0.0; k * h];
        let mut gb2 = vec![0.0; k];
        let inv_n = 1.0 / z.len() as f64;
        let mut dh = vec![0.0; h];
        for (row, &t) in z.iter().zip(y) {
            let f = self.forward_std(row);
            dh.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..k {
                let dl = (f.probs[c] - if c == t { 1.0 } else { 0.0 }) * inv_n;
                gb2[c] += dl;
                let w2row = &self.w2[c * h..(c + 1) * h];
                for j in 0..h {
                    gw2[c * h + j] += dl * f.hidden[j];
                    dh[j] += dl * w2row[j];
                }
            }
            for j in 0..h {
                if f.hidden[j] > 0.0 {
                    gb1[j] += dh[j];
                    let g = &mut gw1[j * d..(j + 1) * d];
                    for (gi, xi) in g.iter_mut().zip(row) {
                        *gi += dh[j] * xi;
                    }
                }
            }
        }
        gw1.iter_mut().zip(&self.w1).for_each(|(g, w)| *g += l2 * w);
        gw2.iter_mut().zip(&self.w2).for_each(|(g, w)| *g += l2 * w);
        [gw1, gb1, gw2, gb2].concat()
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for p in self.params_mut() {
            if i < p.len() {
                return &mut p[i];
            }
            i -= p.len();
        }
        panic!("parameter index out of range")
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Training-loss trace, one entry per epoch plus the initial loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().unwrap()
    }
}

fn check_rows(x: &[Vec<f64>], dim: usize) -> Result<(), ExpertError> {
    for (row, v) in x.iter().enumerate() {
        if v.len() != dim {
            return Err(ExpertError::DimensionMismatch { expected: dim, got: v.len() });
        }
        if v.iter().any(|f| !f.is_finite()) {
            return Err(ExpertError::NonFiniteFeatures { row });
        }
    }
    Ok(())
}

fn check_labels(y: &[usize], n_classes: usize, n_rows: usize) -> Result<(), ExpertError> {
    if y.len() != n_rows {
        return Err(ExpertError::DimensionMismatch { expected: n_rows, got: y.len() });
    }
    let mut counts = vec![0usize; n_classes];
    for &t in y {
        if t >= n_classes {
            return Err(ExpertError::DegenerateLabels(format!("label index {t} ≥ {n_classes} classes")));
        }
        counts[t] += 1;
    }
    if counts.iter().filter(|&&c| c >= 2).count() < 2 {
        return Err(ExpertError::DegenerateLabels(format!("class counts {counts:?}")));
    }
    Ok(())
}

/// Full-batch gradient descent with momentum starting from `model`'s weights;
/// the model's standardisation stats are used as they are.
pub fn fine_tune(
    model: &mut ExpertModel,
    x: &[Vec<f64>],
    y: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport, ExpertError> {
    cfg.validate()?;
    check_rows(x, model.input_dim)?;
    check_labels(y, model.n_classes(), x.len())?;
    let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
    let mut velocity = vec![0.0; model.n_params()];
    let mut losses = vec![model.loss_std(&z, y, cfg.l2)];
    for epoch in 0..cfg.epochs {
        let grad = model.gradient_std(&z, y, cfg.l2);
        for (v, g) in velocity.iter_mut().zip(&grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
        }
        let mut offset = 0;
        for p in model.params_mut() {
            for (w, v) in p.iter_mut().zip(&velocity[offset..]) {
                *w += v;
            }
            offset += p.len();
        }
        let loss = model.loss_std(&z, y, cfg.l2);
        if !loss.is_finite() {
            return Err(ExpertError::Diverged(epoch));
        }
        losses.push(loss);
    }
    Ok(TrainReport { losses })
}

/// Fits a fresh expert; z-score statistics come from `x` only.
#[allow(clippy::too_many_arguments)]
pub fn train_expert(
    expert_id: &str,
    recording_type: Option<RecordingType>,
    feature_hash: &str,
    class_names: &[String],
    x: &[Vec<f64>],
    y: &[usize],
    cfg: &TrainConfig,
) -> Result<(ExpertModel, TrainReport), ExpertError> {
    let dim = x.first().map_or(0, Vec::len);
    check_rows(x, dim)?;
    check_labels(y, class_names.len(), x.len())?;
    let mut model = ExpertModel::initialise(expert_id, recording_type, feature_hash, class_names, dim, cfg);
    let n = x.len() as f64;
    for d in 0..dim {
        let m = x.iter().map(|r| r[d]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / n;
        model.mean[d] = m;
        model.std[d] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let report = fine_tune(&mut model, x, y, cfg)?;
    Ok((model, report))
}

/// New classifier sharing the detector's first layer and standardisation,
/// with a freshly initialised output layer for `class_names`.
pub fn warm_start_classifier(
    detector: &ExpertModel,
    expert_id: &str,
    class_names: &[String],
    feature_hash: &str,
    cfg: &TrainConfig,
) -> Result<ExpertModel, ExpertError> {
    if feature_hash != detector.feature_hash {
        return Err(ExpertError::IncompatibleFeatureConfig {
            expected: detector.feature_hash.clone(),
            got: feature_hash.to_string(),
        });
    }
    if class_names.len() < 2 {
        return Err(ExpertError::DegenerateLabels("need at least two classes".into()));
    }
    let mut rng = rng_from(cfg.seed, &["warm-start", expert_id]);
    let k = class_names.len();
    Ok(ExpertModel {
        expert_id: expert_id.to_string(),
        class_names: class_names.to_vec(),
        provenance_tag: format!("{}{WARM_START_SUFFIX}", detector.provenance_tag),
        w2: ExpertModel::init_layer(&mut rng, k, detector.hidden, cfg.init_scale),
        b2: vec![0.0; k],
        ..detector.clone()
    })
}

/// Largest relative error `|a−n| / max(|a|, |n|, 1e-8)` between analytic and
/// central-difference gradients over every parameter.
pub fn gradient_check(model: &ExpertModel, x: &[Vec<f64>], y: &[usize], l2: f64, epsilon: f64) -> f64 {
    let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
    let analytic = model.gradient_std(&z, y, l2);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let w = *probe.param_mut(i);
        *probe.param_mut(i) = w + epsilon;
        let up = probe.loss_std(&z, y, l2);
        *probe.param_mut(i) = w - epsilon;
        let down = probe.loss_std(&z, y, l2);
        *probe.param_mut(i) = w;
        let n = (up - down) / (2.0 * epsilon);
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
    }
    worst
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

fn put_f64s(b: &mut Vec<u8>, v: &[f64]) {
    put_u32(b, v.len() as u32);
    v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let out = self.bytes.get(self.pos..self.pos + n).ok_or("truncated file")?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }

    fn f64s(&mut self) -> Result<Vec<f64>, String> {
        let n = self.u32()? as usize;
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl ExpertModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = MODEL_MAGIC.to_vec();
        put_u32(&mut b, MODEL_VERSION);
        put_str(&mut b, &self.expert_id);
        put_str(&mut b, self.recording_type.map_or("all", |r| r.as_str()));
        put_str(&mut b, &self.feature_hash);
        put_str(&mut b, &self.provenance_tag);
        put_u32(&mut b, self.class_names.len() as u32);
        self.class_names.iter().for_each(|c| put_str(&mut b, c));
        put_u32(&mut b, self.input_dim as u32);
        put_u32(&mut b, self.hidden as u32);
        for v in [&self.mean, &self.std, &self.w1, &self.b1, &self.w2, &self.b2] {
            put_f64s(&mut b, v);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err("bad magic".into());
        }
        if r.u32()? != MODEL_VERSION {
            return Err("unsupported version".into());
        }
        let expert_id = r.string()?;
        let rtype = r.string()?;
        let recording_type = match rtype.as_str() {
            "all" => None,
            other => Some(RecordingType::parse(other).ok_or(format!("bad recording type {other}"))?),
        };
        let feature_hash = r.string()?;
        let provenance_tag = r.string()?;
        let k = r.u32()? as usize;
        let class_names = (0..k).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let input_dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let mut vs = (0..6).map(|_| r.f64s()).collect::<Result<Vec<_>, _>>()?.into_iter();
        let mut next = || vs.next().unwrap();
        let model = ExpertModel {
            expert_id,
            recording_type,
            feature_hash,
            class_names,
            provenance_tag,
            input_dim,
            hidden,
            mean: next(),
            std: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let shapes = [
            (model.mean.len(), input_dim),
            (model.std.len(), input_dim),
            (model.w1.len(), hidden * input_dim),
            (model.b1.len(), hidden),
            (model.w2.len(), k * hidden),
            (model.b2.len(), k),
        ];
        if shapes.iter().any(|(a, b)| a != b) || k < 2 {
            return Err("inconsistent dimensions".into());
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExpertError> {
        let err =
            |e: std::io::Error| ExpertError::ModelFile { path: path.display().to_string(), message: e.to_string() };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(err)?;
        }
        fs::write(path, self.to_bytes()).map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, ExpertError> {
        let err = |message: String| ExpertError::ModelFile { path: path.display().to_string(), message };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        Self::from_bytes(&bytes).map_err(err)
    }
}

/// One row of an external-predictions JSON-Lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalPrediction {
    pub clip_id: String,
    pub expert_id: String,
    pub recording_type: RecordingType,
    pub provenance: String,
    pub class_names: Vec<String>,
    pub probs: Vec<f64>,
}

impl ExternalPrediction {
    pub fn to_prediction(&self) -> Prediction {
        Prediction {
            clip_id: self.clip_id.clone(),
            expert_id: self.expert_id.clone(),
            probs: self.probs.clone(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Parses and validates external predictions; each row is renormalised to sum 1.
pub fn parse_external_predictions(text: &str) -> Result<Vec<ExternalPrediction>, ExpertError> {
    let mut rows = Vec::new();
    let mut classes: Option<Vec<String>> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut row: ExternalPrediction =
            serde_json::from_str(raw).map_err(|e| ExpertError::SchemaViolation { line, message: e.to_string() })?;
        let schema = |message: &str| ExpertError::SchemaViolation { line, message: message.to_string() };
        if row.class_names.len() < 2 || row.class_names.iter().collect::<BTreeSet<_>>().len() != row.class_names.len() {
            return Err(schema("class_names must hold at least two unique names"));
        }
        if row.probs.len() != row.class_names.len() {
            return Err(schema("probs and class_names differ in length"));
        }
        if row.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(schema("probabilities must be finite and non-negative"));
        }
        match &classes {
            None => classes = Some(row.class_names.clone()),
            Some(expected) if *expected != row.class_names => {
                return Err(ExpertError::InconsistentClassNames {
                    line,
                    expected: expected.clone(),
                    got: row.class_names,
                })
            }
            Some(_) => {}
        }
        let sum: f64 = row.probs.iter().sum();
        if !(0.999..=1.001).contains(&sum) {
            return Err(ExpertError::UnnormalizedBeyondTolerance { line, sum });
        }
        row.probs.iter_mut().for_each(|p| *p /= sum);
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_external_predictions(path: &Path) -> Result<Vec<ExternalPrediction>, ExpertError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ExpertError::SchemaViolation { line: 0, message: format!("{}: {e}", path.display()) })?;
    parse_external_predictions(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::standard_normal;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_from(seed, &["blobs"]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let label = i % 2;
            let shift = if label == 0 { -5.0 } else { 5.0 };
            x.push((0..80).map(|_| shift + standard_normal(&mut rng)).collect());
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_fit_perfectly_and_deterministically() {
        let (x, y) = blobs(1);
        let cfg = TrainConfig { seed: 5, ..Default::default() };
        let (model, report) = train_expert("e", Some(RecordingType::Sentence), "h", &names(2), &x, &y, &cfg).unwrap();
        assert!(report.last() < report.initial());
        let correct = x.iter().zip(&y).filter(|(r, t)| model.predict("c", r).unwrap().argmax() == **t).count();
        assert_eq!(correct, 40);
        let (again, _) = train_expert("e", Some(RecordingType::Sentence), "h", &names(2), &x, &y, &cfg).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn degenerate_and_non_finite_inputs() {
        let (x, _) = blobs(2);
        let cfg = TrainConfig::default();
        let same = vec![0; x.len()];
        assert!(matches!(
            train_expert("e", None, "h", &names(2), &x, &same, &cfg),
            Err(ExpertError::DegenerateLabels(_))
        ));
        let mut bad = x.clone();
        bad[3][7] = f64::NAN;
        let y: Vec<usize> = (0..x.len()).map(|i| i % 2).collect();
        assert!(matches!(
            train_expert("e", None, "h", &names(2), &bad, &y, &cfg),
            Err(ExpertError::NonFiniteFeatures { row: 3 })
        ));
    }

    fn zero_model(k: usize) -> ExpertModel {
        let mut m = ExpertModel::initialise(
            "z",
            None,
            "h",
            &names(k),
            4,
            &TrainConfig { hidden_units: 3, ..Default::default() },
        );
        m.w1.iter_mut().for_each(|w| *w = 0.0);
        m.w2.iter_mut().for_each(|w| *w = 0.0);
        m
    }

    #[test]
    fn softmax_closed_forms() {
        let p = zero_model(3).predict("c", &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(p.probs.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let mut m = zero_model(2);
        assert_eq!(m.predict("c", &[0.0; 4]).unwrap().probs, vec![0.5, 0.5]);
        m.b2 = vec![9f64.ln(), 0.0];
        let p = m.predict("c", &[0.0; 4]).unwrap();
        assert!((p.probs[0] - 0.9).abs() < 1e-9 && (p.probs[1] - 0.1).abs() < 1e-9);
        m.b2 = vec![9f64.ln() + 7.0, 7.0];
        let shifted = m.predict("c", &[0.0; 4]).unwrap();
        assert!((shifted.probs[0] - p.probs[0]).abs() < 1e-12);
        assert!(matches!(m.predict("c", &[0.0; 3]), Err(ExpertError::DimensionMismatch { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = TrainConfig { hidden_units: 8, init_scale: 1.0, seed: 11, ..Default::default() };
        let model = ExpertModel::initialise("g", None, "h", &names(3), 10, &cfg);
        let mut rng = rng_from(11, &["batch"]);
        let x: Vec<Vec<f64>> = (0..6).map(|_| (0..10).map(|_| standard_normal(&mut rng)).collect()).collect();
        let y = vec![0, 1, 2, 0, 1, 2];
        assert!(gradient_check(&model, &x, &y, 1e-4, 1e-5) < 1e-4);
    }

    #[test]
    fn dead_unit_has_zero_gradient_both_ways() {
        let cfg = TrainConfig { hidden_units: 4, init_scale: 1.0, seed: 3, ..Default::default() };
        let mut model = ExpertModel::initialise("g", None, "h", &names(2), 5, &cfg);
        // Unit 0 never activates: zero inflow weights and a negative bias.
        model.w1[..5].iter_mut().for_each(|w| *w = 0.0);
        model.b1[0] = -1.0;
        let x = vec![vec![0.3, -0.2, 0.5, 1.0, -1.0], vec![-0.4, 0.1, 0.2, -0.3, 0.9]];
        let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
        let g = model.gradient_std(&z, &[0, 1], 0.0);
        assert!(g[..5].iter().all(|v| *v == 0.0));
        assert!(gradient_check(&model, &x, &[0, 1], 0.0, 1e-5) < 1e-4);
    }

    #[test]
    fn warm_start_copies_first_layer_only() {
        let (x, y) = blobs(4);
        let cfg = TrainConfig { epochs: 20, ..Default::default() };
        let (detector, _) = train_expert("det", Some(RecordingType::Sentence), "h", &names(2), &x, &y, &cfg).unwrap();
        let cls = warm_start_classifier(&detector, "cls", &names(2), "h", &cfg).unwrap();
        assert_eq!(cls.w1, detector.w1);
        assert_ne!(cls.w2, detector.w2);
        assert_eq!(cls.provenance_tag, "builtin+warmstart:detection");
        for row in &x[..5] {
            let a = cls.hidden_activations(row).unwrap();
            let b = detector.hidden_activations(row).unwrap();
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-9));
        }
        assert!(matches!(
            warm_start_classifier(&detector, "cls", &names(3), "other", &cfg),
            Err(ExpertError::IncompatibleFeatureConfig { .. })
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let (x, y) = blobs(6);
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let (model, _) = train_expert("m", Some(RecordingType::Vowel), "abc", &names(2), &x, &y, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vkem");
        model.save(&path).unwrap();
        assert_eq!(ExpertModel::load(&path).unwrap(), model);
        let mut bytes = model.to_bytes();
        bytes.pop();
        assert!(ExpertModel::from_bytes(&bytes).is_err());
    }

    fn row(probs: &str, classes: &str) -> String {
        format!(
            r#"{{"clip_id":"c","expert_id":"w2v","recording_type":"sentence","provenance":"pretrain:librispeech","class_names":{classes},"probs":{probs}}}"#
        )
    }

    #[test]
    fn external_prediction_validation() {
        let ok = parse_external_predictions(&row("[0.7,0.3]", r#"["H","P"]"#)).unwrap();
        assert_eq!(ok[0].probs.iter().sum::<f64>(), 1.0);
        let slightly = parse_external_predictions(&row("[0.7004,0.3]", r#"["H","P"]"#)).unwrap();
        assert!((slightly[0].probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(
            parse_external_predictions(&row("[0.6,0.3]", r#"["H","P"]"#)),
            Err(ExpertError::UnnormalizedBeyondTolerance { line: 1, .. })
        ));
        let mixed = format!("{}\n{}", row("[0.7,0.3]", r#"["H","P"]"#), row("[0.7,0.3]", r#"["P","H"]"#));
        assert!(matches!(parse_external_predictions(&mixed), Err(ExpertError::InconsistentClassNames { line: 2, .. })));
        assert!(matches!(
            parse_external_predictions(r#"{"clip_id":"c"}"#),
            Err(ExpertError::SchemaViolation { line: 1, .. })
        ));
    }
}
