//! Speaker-disjoint stratified k-fold cross-validation, session-level metrics,
//! the ablation and cross-domain runners, and report rendering.
//!
//! Every fold trains its experts from scratch on the other folds. Augmented
//! and synthetic data are produced from training-fold material only, and a
//! lineage check refuses to run if any training row traces back to a test
//! speaker. Scoring is per session: one decision and one label each.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_wav, AudioClip, AudioError};
use crate::augment::{apply_policy, draw_ops, variant_record, AugmentError, AugmentPolicy, NoiseSource};
use crate::corpus::{resolve_path, ClipRecord, Label, Origin, RecordingType};
use crate::experts::{
    fine_tune, train_expert, warm_start_classifier, ExpertError, ExpertModel, ExternalPrediction, Prediction,
    TrainConfig,
};
use crate::features::{pooled_features, FeatureCache, FeatureConfig, FeatureError};
use crate::moe::{default_priority, group_sessions, select_prediction, MoeDecision, MoeError};
use crate::synthgen::{
    condition_from_reference, plan_balancing, plan_records, render_record, BalanceKey, RenderShape, SynthError,
};
use crate::util::{derive_seed, rng_from, short_hash};

pub const MOE_ROW: &str = "moe";
pub const POSITIVE_CLASS: &str = "pathological";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no items to score")]
    EmptyInput,
    #[error("empty class set")]
    EmptyClassSet,
    #[error("AUC needs both classes present")]
    SingleClassOnly,
    #[error("label {label} has {found} speakers, fewer than k = {k}")]
    TooFewSpeakers { label: String, found: usize, k: usize },
    #[error("fold {fold}: training row {clip_id} traces back to test speaker {speaker}")]
    LeakageDetected { fold: usize, clip_id: String, speaker: String },
    #[error("no external prediction from {expert_id} for test clip {clip_id}")]
    MissingExternalPredictions { clip_id: String, expert_id: String },
    #[error("ablation level {level} is infeasible: {reason}")]
    InfeasibleLevel { level: String, reason: String },
    #[error("empty partition: {0}")]
    EmptyPartition(String),
    #[error("nothing to report")]
    EmptyReport,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("pathological clip {0} has no pathology_class")]
    MissingPathologyClass(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("report parse error: {0}")]
    ReportFormat(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Moe(#[from] MoeError),
}

impl EvalError {
    /// Broken invariants (as opposed to bad input).
    pub fn is_internal(&self) -> bool {
        matches!(self, EvalError::LeakageDetected { .. })
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        EvalError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

// ---------------------------------------------------------------- metrics

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1; classes absent from both predictions and
/// labels are skipped.
pub fn macro_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64, EvalError> {
    if n_classes == 0 {
        return Err(EvalError::EmptyClassSet);
    }
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(EvalError::InvalidConfig(format!("class index {bad} outside the class set")));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            counts[p].0 += 1;
        } else {
            counts[p].1 += 1;
            counts[t].2 += 1;
        }
    }
    let f1s: Vec<f64> = counts
        .iter()
        .filter(|(tp, fp, fnn)| tp + fp + fnn > 0)
        .map(|&(tp, fp, fnn)| 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64)
        .collect();
    Ok(f1s.iter().sum::<f64>() / f1s.len() as f64)
}

/// Mann–Whitney AUC: share of (positive, negative) pairs ranked correctly,
/// ties counting one half. Computed from average ranks in O(n log n).
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positive.len() {
        return Err(EvalError::LengthMismatch(scores.len(), positive.len()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tie ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&o| positive[o]).count() as u64;
        twice_rank_sum += twice_avg_rank * pos_in_group;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (n_pos * (n_pos + 1)) as u64;
    Ok(twice_u as f64 / 2.0 / (n_pos * n_neg) as f64)
}

/// Mean taken as an offset from the first value, so constant inputs are exact.
pub fn shifted_mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else { return f64::NAN };
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = shifted_mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------- folds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of_speaker(&self, speaker: &str) -> Option<usize> {
        self.folds.get(speaker).copied()
    }

    /// A row's fold is its speaker's; rows of unassigned speakers (synthetic
    /// voices) are training-only.
    pub fn fold_of(&self, record: &ClipRecord) -> Option<usize> {
        self.fold_of_speaker(&record.speaker_id)
    }

    pub fn speakers_in(&self, fold: usize) -> BTreeSet<&str> {
        self.folds.iter().filter(|(_, f)| **f == fold).map(|(s, _)| s.as_str()).collect()
    }

    pub fn fingerprint(&self) -> String {
        short_hash(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

/// Deals real speakers to `k` folds.
///
/// Within each label, speakers are grouped by pathology class, shuffled with a
/// seed-derived stream per group, concatenated in class order and dealt
/// round-robin, so per-label counts differ by at most one across folds and
/// classes spread evenly.
pub fn make_speaker_folds(records: &[ClipRecord], k: usize, seed: u64) -> Result<FoldAssignment, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidConfig(format!("k = {k} (need at least 2)")));
    }
    let mut strata: BTreeMap<Label, BTreeMap<String, BTreeSet<&str>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.origin == Origin::Real) {
        strata
            .entry(r.label)
            .or_default()
            .entry(r.pathology_class.clone().unwrap_or_default())
            .or_default()
            .insert(&r.speaker_id);
    }
    let mut folds = BTreeMap::new();
    for (label, classes) in &strata {
        let found: usize = classes.values().map(BTreeSet::len).sum();
        if found < k {
            return Err(EvalError::TooFewSpeakers { label: label.as_str().into(), found, k });
        }
        let mut dealt = 0usize;
        for (class, speakers) in classes {
            let mut order: Vec<&str> = speakers.iter().copied().collect();
            order.shuffle(&mut rng_from(seed, &["folds", label.as_str(), class]));
            for s in order {
                folds.insert(s.to_string(), dealt % k);
                dealt += 1;
            }
        }
    }
    Ok(FoldAssignment { k, seed, folds })
}

/// Speakers a row derives from: its own, those that conditioned it, and
/// (recursively) its parent clip's.
pub fn lineage_speakers<'a>(record: &'a ClipRecord, by_clip: &HashMap<&str, &'a ClipRecord>) -> BTreeSet<&'a str> {
    let mut out = BTreeSet::new();
    let mut seen = BTreeSet::new();
    let mut cur = Some(record);
    while let Some(r) = cur {
        if !seen.insert(r.clip_id.as_str()) {
            break;
        }
        out.insert(r.speaker_id.as_str());
        out.extend(r.conditioned_on.iter().map(String::as_str));
        cur = r.parent_clip_id.as_deref().and_then(|p| by_clip.get(p).copied());
    }
    out
}

/// Fails if any training row's lineage reaches a test speaker.
pub fn check_leakage(
    fold: usize,
    train: &[&ClipRecord],
    test_speakers: &BTreeSet<&str>,
    by_clip: &HashMap<&str, &ClipRecord>,
) -> Result<(), EvalError> {
    for r in train {
        if let Some(s) = lineage_speakers(r, by_clip).into_iter().find(|s| test_speakers.contains(s)) {
            return Err(EvalError::LeakageDetected { fold, clip_id: r.clip_id.clone(), speaker: s.to_string() });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Classification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "detection" => Some(Task::Detection),
            "classification" => Some(Task::Classification),
            _ => None,
        }
    }
}

/// A built-in expert: one per recording type, or one pooled over both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Sentence,
    Vowel,
    #[serde(rename = "all")]
    Pooled,
}

impl ExpertKind {
    pub fn id(self) -> &'static str {
        match self {
            ExpertKind::Sentence => "sentence",
            ExpertKind::Vowel => "vowel",
            ExpertKind::Pooled => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sentence" => Some(ExpertKind::Sentence),
            "vowel" => Some(ExpertKind::Vowel),
            "all" => Some(ExpertKind::Pooled),
            _ => None,
        }
    }

    pub fn recording_type(self) -> Option<RecordingType> {
        match self {
            ExpertKind::Sentence => Some(RecordingType::Sentence),
            ExpertKind::Vowel => Some(RecordingType::Vowel),
            ExpertKind::Pooled => None,
        }
    }

    fn accepts(self, rtype: RecordingType) -> bool {
        self.recording_type().is_none_or(|t| t == rtype)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicies {
    pub sentence: AugmentPolicy,
    pub vowel: AugmentPolicy,
}

impl Default for AugmentPolicies {
    fn default() -> Self {
        AugmentPolicies { sentence: AugmentPolicy::sentence(), vowel: AugmentPolicy::vowel() }
    }
}

impl AugmentPolicies {
    pub fn for_type(&self, rtype: RecordingType) -> &AugmentPolicy {
        match rtype {
            RecordingType::Sentence => &self.sentence,
            RecordingType::Vowel => &self.vowel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthesisSettings {
    pub shape: RenderShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: Task,
    pub experts: Vec<ExpertKind>,
    pub moe: bool,
    pub priority: Vec<String>,
    pub augmentation: Option<AugmentPolicies>,
    pub synthesis: Option<SynthesisSettings>,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub warm_start: bool,
    /// Origins eligible for training; test rows are always real.
    pub train_origins: Vec<Origin>,
    /// Content hash of `external`, so it takes part in the fingerprint.
    pub external_digest: Option<String>,
    #[serde(skip)]
    pub external: Vec<ExternalPrediction>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            task: Task::Detection,
            experts: vec![ExpertKind::Sentence, ExpertKind::Vowel],
            moe: true,
            priority: default_priority(),
            augmentation: Some(AugmentPolicies::default()),
            synthesis: None,
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
            warm_start: false,
            train_origins: vec![Origin::Real, Origin::Synthetic, Origin::Augmented],
            external_digest: None,
            external: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn with_external(mut self, rows: Vec<ExternalPrediction>) -> Self {
        let text: String = rows.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect();
        self.external_digest = (!rows.is_empty()).then(|| short_hash(text.as_bytes()));
        self.external = rows;
        self
    }

    fn external_experts(&self) -> BTreeMap<String, RecordingType> {
        self.external.iter().map(|r| (r.expert_id.clone(), r.recording_type)).collect()
    }

    /// Expert ids taking part, built-in first.
    pub fn expert_ids(&self) -> Vec<String> {
        let external = self.external_experts();
        let mut ids: Vec<String> =
            self.experts.iter().map(|e| e.id().to_string()).filter(|id| !external.contains_key(id)).collect();
        ids.extend(external.into_keys());
        ids
    }

    /// The configured priority followed by any unlisted experts
    /// (sentence-type before vowel-type, then by id).
    pub fn effective_priority(&self) -> Vec<String> {
        let mut out: Vec<String> = self.priority.clone();
        let external = self.external_experts();
        let mut missing: Vec<(u8, String)> = self
            .expert_ids()
            .into_iter()
            .filter(|id| !out.contains(id))
            .map(|id| {
                let rank = match external.get(&id).copied().or(ExpertKind::parse(&id).and_then(|k| k.recording_type()))
                {
                    Some(RecordingType::Sentence) => 0,
                    Some(RecordingType::Vowel) => 1,
                    None => 2,
                };
                (rank, id)
            })
            .collect();
        missing.sort();
        out.extend(missing.into_iter().map(|(_, id)| id));
        out
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.expert_ids().is_empty() {
            return Err(EvalError::InvalidConfig("no experts configured".into()));
        }
        if !self.moe && self.expert_ids().len() > 1 && self.experts.contains(&ExpertKind::Pooled) {
            return Err(EvalError::InvalidConfig("the pooled expert runs alone".into()));
        }
        if self.train_origins.is_empty() {
            return Err(EvalError::InvalidConfig("no training origins".into()));
        }
        if self.warm_start && self.task != Task::Classification {
            return Err(EvalError::InvalidConfig("warm start applies to classification only".into()));
        }
        if let Some(p) = &self.augmentation {
            p.sentence.validate()?;
            p.vowel.validate()?;
        }
        self.train.validate()?;
        self.features.mfcc.validate()?;
        Ok(())
    }

    /// Stable hash of this config plus the run parameters and manifest.
    pub fn fingerprint(&self, k: usize, seed: u64, records: &[ClipRecord]) -> String {
        let value = serde_json::json!({
            "config": self,
            "k": k,
            "seed": seed,
            "manifest": short_hash(crate::corpus::serialize_manifest(records).as_bytes()),
        });
        short_hash(value.to_string().as_bytes())
    }
}

// ---------------------------------------------------------------- audio access

pub trait AudioSource: Sync {
    fn load(&self, record: &ClipRecord) -> Result<AudioClip, EvalError>;
}

/// Reads WAVs relative to a manifest directory and converts to 16 kHz.
#[derive(Debug, Clone)]
pub struct DirAudio {
    pub root: PathBuf,
}

impl AudioSource for DirAudio {
    fn load(&self, record: &ClipRecord) -> Result<AudioClip, EvalError> {
        let clip = load_wav(&resolve_path(&self.root, record))?;
        Ok(clip.with_id(record.clip_id.clone()).to_canonical()?)
    }
}

/// In-memory clips keyed by clip_id.
#[derive(Debug, Clone, Default)]
pub struct MemoryAudio(pub HashMap<String, AudioClip>);

impl AudioSource for MemoryAudio {
    fn load(&self, record: &ClipRecord) -> Result<AudioClip, EvalError> {
        let clip = self.0.get(&record.clip_id).ok_or_else(|| EvalError::Io {
            path: record.path.clone(),
            message: format!("no audio for clip {}", record.clip_id),
        })?;
        Ok(clip.to_canonical()?)
    }
}

pub struct RunContext<'a> {
    pub audio: &'a dyn AudioSource,
    pub cache: Option<FeatureCache>,
}

impl<'a> RunContext<'a> {
    pub fn new(audio: &'a dyn AudioSource) -> Self {
        RunContext { audio, cache: None }
    }

    fn features(
        &self,
        key: &str,
        cfg: &FeatureConfig,
        clip: impl FnOnce() -> Result<AudioClip, EvalError>,
    ) -> Result<Vec<f64>, EvalError> {
        let compute = || -> Result<Vec<f64>, EvalError> { Ok(pooled_features(&clip()?, cfg)?) };
        match &self.cache {
            Some(cache) => cache.get_or_compute(key, cfg, compute),
            None => compute(),
        }
    }
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_sessions: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Metrics of one decision source (an expert or the MoE) across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub folds: Vec<FoldMetrics>,
    pub mean: Metrics,
    /// Sample standard deviation over folds.
    pub std: Metrics,
    /// Metrics over all out-of-fold session decisions at once.
    pub pooled: Metrics,
}

impl RowReport {
    fn from_folds(folds: Vec<FoldMetrics>, pooled: Metrics) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let f1: Vec<f64> = folds.iter().map(|f| f.macro_f1).collect();
        let auc: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
        let mean = shifted_mean;
        RowReport {
            mean: Metrics { accuracy: mean(&acc), macro_f1: mean(&f1), auc: (!auc.is_empty()).then(|| mean(&auc)) },
            std: Metrics {
                accuracy: sample_std(&acc),
                macro_f1: sample_std(&f1),
                auc: (!auc.is_empty()).then(|| sample_std(&auc)),
            },
            folds,
            pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub k: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    pub fold_fingerprint: String,
    /// Row carrying the headline numbers.
    pub primary: String,
    pub rows: BTreeMap<String, RowReport>,
}

impl MetricsReport {
    pub fn primary_row(&self) -> &RowReport {
        &self.rows[&self.primary]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub level: AblationLevel,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub fold_fingerprint: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub train_origin: Origin,
    pub test_origin: Origin,
    pub report: MetricsReport,
    /// Same folds, trained on real data.
    pub reference: MetricsReport,
    /// Primary-row means, cross-domain minus reference.
    pub deltas: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Cv(MetricsReport),
    Ablation(AblationReport),
    CrossDomain(CrossDomainReport),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

/// JSON with keys sorted at every level.
pub fn reports_to_json(reports: &[Report]) -> Result<String, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let value = serde_json::to_value(reports).map_err(|e| EvalError::ReportFormat(e.to_string()))?;
    Ok(serde_json::to_string_pretty(&value).expect("value serializes") + "\n")
}

pub fn reports_from_json(text: &str) -> Result<Vec<Report>, EvalError> {
    serde_json::from_str(text).map_err(|e| EvalError::ReportFormat(e.to_string()))
}

/// `0.911`, or `-` when absent.
pub fn fmt_mean(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}

fn fmt_fraction(v: f64, sign: bool) -> String {
    let s = if sign { format!("{v:+.3}") } else { format!("{v:.3}") };
    s.replacen("0.", ".", 1)
}

/// `0.911 ±.029`, with ` (-.100)` appended when a delta is given.
pub fn fmt_cell(mean: Option<f64>, std: Option<f64>, delta: Option<f64>) -> String {
    let Some(m) = mean else { return "-".into() };
    let mut s = format!("{m:.3} ±{}", fmt_fraction(std.unwrap_or(0.0), false));
    if let Some(d) = delta {
        write!(s, " ({})", fmt_fraction(d, true)).unwrap();
    }
    s
}

fn metric_cells(row: &RowReport, deltas: Option<&Metrics>, task: Task) -> Vec<String> {
    let mut cells = vec![
        fmt_cell(Some(row.mean.accuracy), Some(row.std.accuracy), deltas.map(|d| d.accuracy)),
        fmt_cell(Some(row.mean.macro_f1), Some(row.std.macro_f1), deltas.map(|d| d.macro_f1)),
    ];
    if task == Task::Detection {
        cells.push(fmt_cell(row.mean.auc, row.std.auc, deltas.and_then(|d| d.auc)));
    }
    cells
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    writeln!(out, "| {} |", header.join(" | ")).unwrap();
    writeln!(out, "|{}|", header.iter().map(|_| "---").collect::<Vec<_>>().join("|")).unwrap();
    for r in rows {
        writeln!(out, "| {} |", r.join(" | ")).unwrap();
    }
}

fn metric_header(task: Task) -> Vec<&'static str> {
    let mut h = vec!["Accuracy", "F1 Macro"];
    if task == Task::Detection {
        h.push("AUC");
    }
    h
}

pub fn reports_to_markdown(reports: &[Report]) -> Result<String, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let mut out = String::new();
    for report in reports {
        match report {
            Report::Cv(r) => {
                writeln!(
                    out,
                    "## {} ({}-fold CV, seed {}, config {})\n",
                    r.task.as_str(),
                    r.k,
                    r.seed,
                    r.config_fingerprint
                )
                .unwrap();
                let mut header = vec!["Model"];
                header.extend(metric_header(r.task));
                let rows: Vec<Vec<String>> = r
                    .rows
                    .iter()
                    .map(|(name, row)| {
                        let label = if *name == r.primary { format!("**{name}**") } else { name.clone() };
                        std::iter::once(label).chain(metric_cells(row, None, r.task)).collect()
                    })
                    .collect();
                table(&mut out, &header, &rows);
            }
            Report::Ablation(a) => {
                writeln!(out, "## Ablation (folds {})\n", a.fold_fingerprint).unwrap();
                let rows: Vec<Vec<String>> = a
                    .rows
                    .iter()
                    .map(|row| {
                        let p = row.report.primary_row();
                        vec![row.level.as_str().to_string(), fmt_cell(p.mean.auc, p.std.auc, None)]
                    })
                    .collect();
                table(&mut out, &["Level", "AUC"], &rows);
                for w in &a.warnings {
                    writeln!(out, "\n> warning: {w}").unwrap();
                }
            }
            Report::CrossDomain(c) => {
                writeln!(
                    out,
                    "## Cross-domain: train {} / test {} (difference with real-trained in brackets)\n",
                    c.train_origin.as_str(),
                    c.test_origin.as_str()
                )
                .unwrap();
                let mut header = vec!["Model"];
                header.extend(metric_header(c.report.task));
                let row = vec![c.report.primary.clone()]
                    .into_iter()
                    .chain(metric_cells(c.report.primary_row(), Some(&c.deltas), c.report.task))
                    .collect();
                table(&mut out, &header, &[row]);
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_report(reports: &[Report], format: ReportFormat, path: &Path) -> Result<(), EvalError> {
    let text = match format {
        ReportFormat::Json => reports_to_json(reports)?,
        ReportFormat::Markdown => reports_to_markdown(reports)?,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| EvalError::io(path, e))
}

// ---------------------------------------------------------------- pipeline

/// Class names of a task over a manifest, and the class of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskClasses {
    pub names: Vec<String>,
}

impl TaskClasses {
    /// Detection: healthy / pathological. Classification: the sorted
    /// pathology classes of pathological rows.
    pub fn new(task: Task, records: &[ClipRecord]) -> Result<Self, EvalError> {
        let names = match task {
            Task::Detection => vec![Label::Healthy.as_str().to_string(), Label::Pathological.as_str().to_string()],
            Task::Classification => {
                let mut set = BTreeSet::new();
                for r in records.iter().filter(|r| r.label == Label::Pathological) {
                    set.insert(
                        r.pathology_class.clone().ok_or_else(|| EvalError::MissingPathologyClass(r.clip_id.clone()))?,
                    );
                }
                set.into_iter().collect()
            }
        };
        if names.len() < 2 {
            return Err(EvalError::InvalidConfig(format!("task needs at least two classes, found {names:?}")));
        }
        Ok(TaskClasses { names })
    }

    /// Class index of a row, `None` when the row is outside the task.
    pub fn index(&self, task: Task, r: &ClipRecord) -> Option<usize> {
        let name = match task {
            Task::Detection => r.label.as_str(),
            Task::Classification if r.label == Label::Pathological => r.pathology_class.as_deref()?,
            Task::Classification => return None,
        };
        self.names.iter().position(|n| n == name)
    }
}

/// Everything a CV run produced, for the run directory.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub folds: FoldAssignment,
    pub models: Vec<(usize, ExpertModel)>,
    pub predictions: Vec<(usize, Prediction)>,
    pub decisions: Vec<(usize, MoeDecision)>,
}

struct FoldResult {
    fold: usize,
    models: Vec<ExpertModel>,
    predictions: Vec<Prediction>,
    /// Row name → session decisions (session, probs, class names, truth).
    sessions: BTreeMap<String, Vec<SessionScore>>,
    decisions: Vec<MoeDecision>,
}

#[derive(Debug, Clone)]
struct SessionScore {
    pred: usize,
    truth: usize,
    score: f64,
}

fn score_fold(fold: usize, scores: &[SessionScore], task: Task, n_classes: usize) -> Result<FoldMetrics, EvalError> {
    let m = score_all(scores, task, n_classes)?;
    Ok(FoldMetrics { fold, n_sessions: scores.len(), accuracy: m.accuracy, macro_f1: m.macro_f1, auc: m.auc })
}

fn score_all(scores: &[SessionScore], task: Task, n_classes: usize) -> Result<Metrics, EvalError> {
    let pred: Vec<usize> = scores.iter().map(|s| s.pred).collect();
    let truth: Vec<usize> = scores.iter().map(|s| s.truth).collect();
    let auc = match task {
        Task::Detection => {
            let s: Vec<f64> = scores.iter().map(|s| s.score).collect();
            let pos: Vec<bool> = scores.iter().map(|s| s.truth == 1).collect();
            match auc_binary(&s, &pos) {
                Ok(a) => Some(a),
                Err(EvalError::SingleClassOnly) => None,
                Err(e) => return Err(e),
            }
        }
        Task::Classification => None,
    };
    Ok(Metrics { accuracy: accuracy(&pred, &truth)?, macro_f1: macro_f1(&pred, &truth, n_classes)?, auc })
}

/// Precomputed per-clip material shared by all folds.
struct Prepared {
    features: HashMap<String, Vec<f64>>,
    /// Source clip → augmented rows and their features.
    augmented: HashMap<String, Vec<(ClipRecord, Vec<f64>)>>,
}

fn expert_rows<'a>(kind: ExpertKind, rows: &[(&'a ClipRecord, &'a [f64])]) -> Vec<(&'a ClipRecord, &'a [f64])> {
    rows.iter().filter(|(r, _)| kind.accepts(r.recording_type)).copied().collect()
}

pub fn run_cv(
    records: &[ClipRecord],
    ctx: &RunContext,
    cfg: &PipelineConfig,
    k: usize,
    seed: u64,
) -> Result<CvOutcome, EvalError> {
    cfg.validate()?;
    let folds = make_speaker_folds(records, k, seed)?;
    let classes = TaskClasses::new(cfg.task, records)?;
    let priority = cfg.effective_priority();
    let external_types = cfg.external_experts();
    let builtin: Vec<ExpertKind> =
        cfg.experts.iter().copied().filter(|e| !external_types.contains_key(e.id())).collect();
    let uses_type = |t: RecordingType| builtin.iter().any(|e| e.accepts(t)) || external_types.values().any(|x| *x == t);
    let by_clip: HashMap<&str, &ClipRecord> = records.iter().map(|r| (r.clip_id.as_str(), r)).collect();

    let in_task: Vec<&ClipRecord> =
        records.iter().filter(|r| classes.index(cfg.task, r).is_some() && uses_type(r.recording_type)).collect();
    let test_pool: Vec<&ClipRecord> = in_task.iter().copied().filter(|r| r.origin == Origin::Real).collect();
    let train_pool: Vec<&ClipRecord> =
        in_task.iter().copied().filter(|r| cfg.train_origins.contains(&r.origin)).collect();
    if test_pool.is_empty() {
        return Err(EvalError::EmptyPartition("no real rows to test on".into()));
    }
    if train_pool.is_empty() {
        return Err(EvalError::EmptyPartition("no rows eligible for training".into()));
    }

    // Externals must cover every test clip of their recording type.
    let external_by_key: HashMap<(&str, &str), &ExternalPrediction> =
        cfg.external.iter().map(|r| ((r.expert_id.as_str(), r.clip_id.as_str()), r)).collect();
    for (expert, rtype) in &external_types {
        for r in test_pool.iter().filter(|r| r.recording_type == *rtype) {
            if !external_by_key.contains_key(&(expert.as_str(), r.clip_id.as_str())) {
                return Err(EvalError::MissingExternalPredictions {
                    clip_id: r.clip_id.clone(),
                    expert_id: expert.clone(),
                });
            }
        }
    }
    if let Some(row) =
        cfg.external.iter().find(|r| r.class_names.iter().collect::<BTreeSet<_>>() != classes.names.iter().collect())
    {
        return Err(EvalError::InvalidConfig(format!(
            "external classes {:?} do not match task classes {:?}",
            row.class_names, classes.names
        )));
    }

    let prepared = prepare(ctx, cfg, &train_pool, &test_pool, &builtin, seed)?;
    let results: Vec<FoldResult> = (0..k)
        .into_par_iter()
        .map(|fold| {
            run_fold(
                fold,
                ctx,
                cfg,
                &folds,
                &classes,
                &priority,
                &builtin,
                &by_clip,
                &train_pool,
                &test_pool,
                &prepared,
                &external_by_key,
                seed,
            )
        })
        .collect::<Result<_, _>>()?;

    let mut row_names: BTreeSet<String> = BTreeSet::new();
    for r in &results {
        row_names.extend(r.sessions.keys().cloned());
    }
    let mut rows = BTreeMap::new();
    for name in row_names {
        let mut fold_metrics = Vec::new();
        let mut all = Vec::new();
        for r in &results {
            if let Some(s) = r.sessions.get(&name).filter(|s| !s.is_empty()) {
                fold_metrics.push(score_fold(r.fold, s, cfg.task, classes.names.len())?);
                all.extend(s.iter().cloned());
            }
        }
        let pooled = score_all(&all, cfg.task, classes.names.len())?;
        rows.insert(name, RowReport::from_folds(fold_metrics, pooled));
    }
    let ids = cfg.expert_ids();
    let primary = if cfg.moe {
        MOE_ROW.to_string()
    } else {
        priority.iter().find(|p| ids.contains(p)).cloned().unwrap_or_else(|| ids[0].clone())
    };
    let report = MetricsReport {
        task: cfg.task,
        k,
        seed,
        config_fingerprint: cfg.fingerprint(k, seed, records),
        fold_fingerprint: folds.fingerprint(),
        primary,
        rows,
    };
    let mut outcome = CvOutcome { report, folds, models: Vec::new(), predictions: Vec::new(), decisions: Vec::new() };
    for r in results {
        outcome.models.extend(r.models.into_iter().map(|m| (r.fold, m)));
        outcome.predictions.extend(r.predictions.into_iter().map(|p| (r.fold, p)));
        outcome.decisions.extend(r.decisions.into_iter().map(|d| (r.fold, d)));
    }
    Ok(outcome)
}

fn augmentation_tag(policies: &AugmentPolicies, seed: u64) -> String {
    short_hash(format!("{}|{seed}", serde_json::to_string(policies).expect("serializable")).as_bytes())
}

fn prepare(
    ctx: &RunContext,
    cfg: &PipelineConfig,
    train_pool: &[&ClipRecord],
    test_pool: &[&ClipRecord],
    builtin: &[ExpertKind],
    seed: u64,
) -> Result<Prepared, EvalError> {
    if builtin.is_empty() {
        return Ok(Prepared { features: HashMap::new(), augmented: HashMap::new() });
    }
    let needs = |r: &&&ClipRecord| builtin.iter().any(|e| e.accepts(r.recording_type));
    let mut unique: BTreeMap<&str, &ClipRecord> = BTreeMap::new();
    for r in train_pool.iter().chain(test_pool).filter(needs) {
        unique.insert(&r.clip_id, r);
    }
    let features: HashMap<String, Vec<f64>> = unique
        .par_iter()
        .map(|(id, r)| Ok((id.to_string(), ctx.features(id, &cfg.features, || ctx.audio.load(r))?)))
        .collect::<Result<_, EvalError>>()?;

    let mut augmented = HashMap::new();
    if let Some(policies) = &cfg.augmentation {
        let tag = augmentation_tag(policies, seed);
        let aug_seed = derive_seed(seed, &["augment"]);
        let sources: Vec<&ClipRecord> =
            train_pool.iter().filter(needs).filter(|r| r.origin != Origin::Augmented).copied().collect();
        augmented = sources
            .par_iter()
            .map(|r| {
                let policy = policies.for_type(r.recording_type);
                let mut audio: Option<AudioClip> = None;
                let mut rows = Vec::new();
                for variant in 0..policy.n_variants_per_clip {
                    let key = format!("{}__aug{variant}-{tag}", r.clip_id);
                    let mut produced: Option<ClipRecord> = None;
                    let feats = ctx.features(&key, &cfg.features, || {
                        let source = match &audio {
                            Some(a) => a.clone(),
                            None => ctx.audio.load(r)?,
                        };
                        audio = Some(source.clone());
                        let mut out = apply_policy(&source, r, policy, &NoiseSource::White, aug_seed)?;
                        let (clip, row) = out.swap_remove(variant);
                        produced = Some(row);
                        Ok(clip)
                    })?;
                    // Rows are cheap to rebuild when the features came from cache.
                    let row = match produced {
                        Some(row) => row,
                        None => augmented_row(r, policy, variant, aug_seed),
                    };
                    rows.push((row, feats));
                }
                Ok((r.clip_id.clone(), rows))
            })
            .collect::<Result<_, EvalError>>()?;
    }
    Ok(Prepared { features, augmented })
}

/// The row `apply_policy` emits for a variant, rebuilt without audio.
fn augmented_row(source: &ClipRecord, policy: &AugmentPolicy, variant: usize, seed: u64) -> ClipRecord {
    let (ops, _) = draw_ops(policy, &source.clip_id, variant, seed);
    variant_record(source, variant, &ops, NoiseSource::White.kind())
}

#[allow(clippy::too_many_arguments)]
fn run_fold(
    fold: usize,
    ctx: &RunContext,
    cfg: &PipelineConfig,
    folds: &FoldAssignment,
    classes: &TaskClasses,
    priority: &[String],
    builtin: &[ExpertKind],
    by_clip: &HashMap<&str, &ClipRecord>,
    train_pool: &[&ClipRecord],
    test_pool: &[&ClipRecord],
    prepared: &Prepared,
    external: &HashMap<(&str, &str), &ExternalPrediction>,
    seed: u64,
) -> Result<FoldResult, EvalError> {
    let test_speakers = folds.speakers_in(fold);
    let test: Vec<&ClipRecord> = test_pool.iter().copied().filter(|r| folds.fold_of(r) == Some(fold)).collect();
    let in_fold_training = |r: &ClipRecord| {
        folds.fold_of(r) != Some(fold) && !r.conditioned_on.iter().any(|s| test_speakers.contains(s.as_str()))
    };
    let base_train: Vec<&ClipRecord> = train_pool.iter().copied().filter(|r| in_fold_training(r)).collect();

    // Generated rows live only for this fold.
    let mut generated: Vec<(ClipRecord, Vec<f64>)> = Vec::new();
    for r in &base_train {
        if let Some(rows) = prepared.augmented.get(&r.clip_id) {
            generated.extend(rows.iter().cloned());
        }
    }
    if let Some(settings) = &cfg.synthesis {
        generated.extend(synthesize_for_fold(fold, ctx, cfg, settings, &base_train, builtin, seed)?);
    }

    let mut all_train: Vec<&ClipRecord> = base_train.clone();
    all_train.extend(generated.iter().map(|(r, _)| r));
    let mut lineage_index = by_clip.clone();
    for (r, _) in &generated {
        lineage_index.insert(&r.clip_id, r);
    }
    check_leakage(fold, &all_train, &test_speakers, &lineage_index)?;

    let mut train_rows: Vec<(&ClipRecord, &[f64])> =
        base_train.iter().filter_map(|r| prepared.features.get(&r.clip_id).map(|f| (*r, f.as_slice()))).collect();
    train_rows.extend(generated.iter().map(|(r, f)| (r, f.as_slice())));

    let mut models = Vec::new();
    let mut predictions = Vec::new();
    for kind in builtin {
        let model = train_builtin(fold, *kind, cfg, classes, &expert_rows(*kind, &train_rows), seed)?;
        for r in test.iter().filter(|r| kind.accepts(r.recording_type)) {
            predictions.push(model.predict(&r.clip_id, &prepared.features[&r.clip_id])?);
        }
        models.push(model);
    }
    let external_ids: BTreeSet<&str> = external.keys().map(|(e, _)| *e).collect();
    for expert in external_ids {
        for r in &test {
            if let Some(row) = external.get(&(expert, r.clip_id.as_str())) {
                predictions.push(row.to_prediction());
            }
        }
    }

    let owned_test: Vec<ClipRecord> = test.iter().map(|r| (*r).clone()).collect();
    let groups = group_sessions(&predictions, &owned_test)?;
    let truth_of: HashMap<&str, usize> = test
        .iter()
        .map(|r| (r.session_id.as_str(), classes.index(cfg.task, r).expect("test rows are in task")))
        .collect();
    let score = |probs: &[f64], names: &[String], session: &str| -> SessionScore {
        let top = &names[crate::experts::argmax(probs)];
        let pos = names.iter().position(|n| n == POSITIVE_CLASS);
        SessionScore {
            pred: classes.names.iter().position(|n| n == top).expect("class sets validated"),
            truth: truth_of[session],
            score: pos.map_or(0.0, |i| probs[i]),
        }
    };
    let mut sessions: BTreeMap<String, Vec<SessionScore>> = BTreeMap::new();
    let mut decisions = Vec::new();
    for g in &groups {
        for (expert, p) in &g.predictions {
            sessions.entry(expert.clone()).or_default().push(score(&p.probs, &p.class_names, &g.session_id));
        }
        if cfg.moe {
            let d = select_prediction(g, priority)?;
            sessions.entry(MOE_ROW.into()).or_default().push(score(&d.probs, &d.class_names, &g.session_id));
            decisions.push(d);
        }
    }
    Ok(FoldResult { fold, models, predictions, sessions, decisions })
}

fn train_builtin(
    fold: usize,
    kind: ExpertKind,
    cfg: &PipelineConfig,
    classes: &TaskClasses,
    rows: &[(&ClipRecord, &[f64])],
    seed: u64,
) -> Result<ExpertModel, EvalError> {
    let train = TrainConfig { seed: derive_seed(seed, &["train", &fold.to_string(), kind.id()]), ..cfg.train };
    let hash = cfg.features.hash();
    let task_rows: Vec<(&[f64], usize)> =
        rows.iter().filter_map(|(r, f)| classes.index(cfg.task, r).map(|c| (*f, c))).collect();
    let x: Vec<Vec<f64>> = task_rows.iter().map(|(f, _)| f.to_vec()).collect();
    let y: Vec<usize> = task_rows.iter().map(|(_, c)| *c).collect();
    if cfg.warm_start {
        // Detector trained on the same training fold, both labels.
        let det_classes = TaskClasses::new(Task::Detection, &[])?;
        let det: Vec<(Vec<f64>, usize)> =
            rows.iter().filter_map(|(r, f)| det_classes.index(Task::Detection, r).map(|c| (f.to_vec(), c))).collect();
        let (dx, dy): (Vec<Vec<f64>>, Vec<usize>) = det.into_iter().unzip();
        let (detector, _) = train_expert(
            &format!("{}-detector", kind.id()),
            kind.recording_type(),
            &hash,
            &det_classes.names,
            &dx,
            &dy,
            &train,
        )?;
        let mut model = warm_start_classifier(&detector, kind.id(), &classes.names, &hash, &train)?;
        fine_tune(&mut model, &x, &y, &train)?;
        return Ok(model);
    }
    Ok(train_expert(kind.id(), kind.recording_type(), &hash, &classes.names, &x, &y, &train)?.0)
}

#[allow(clippy::too_many_arguments)]
fn synthesize_for_fold(
    fold: usize,
    ctx: &RunContext,
    cfg: &PipelineConfig,
    settings: &SynthesisSettings,
    base_train: &[&ClipRecord],
    builtin: &[ExpertKind],
    seed: u64,
) -> Result<Vec<(ClipRecord, Vec<f64>)>, EvalError> {
    let key = match cfg.task {
        Task::Detection => BalanceKey::Label,
        Task::Classification => BalanceKey::PathologyClass,
    };
    let real: Vec<ClipRecord> = base_train
        .iter()
        .filter(|r| r.origin == Origin::Real && builtin.iter().any(|e| e.accepts(r.recording_type)))
        .map(|r| (*r).clone())
        .collect();
    let plan = plan_balancing(&real, key);
    let rows = plan_records(&plan, key, &real, &format!("tts-f{fold}"));
    let fold_seed = derive_seed(seed, &["tts", &fold.to_string()]);
    rows.into_par_iter()
        .map(|mut row| {
            let class = key.class_of(&row);
            let donors: BTreeSet<&str> = real
                .iter()
                .filter(|r| key.class_of(r) == class && r.recording_type == row.recording_type)
                .map(|r| r.speaker_id.as_str())
                .collect();
            let donors: Vec<&str> = donors.into_iter().collect();
            let mut rng = rng_from(fold_seed, &[&row.clip_id]);
            let donor = donors[rng.random_range(0..donors.len())];
            row.conditioned_on = vec![donor.to_string()];
            row.provenance = Some(format!("conditioned:{donor}"));
            let key_id = format!(
                "{}-{}",
                row.clip_id,
                short_hash(format!("{fold_seed}|{donor}|{:?}", settings.shape).as_bytes())
            );
            let feats = ctx.features(&key_id, &cfg.features, || {
                let refs: Vec<AudioClip> = real
                    .iter()
                    .filter(|r| r.speaker_id == donor && r.recording_type == row.recording_type)
                    .map(|r| ctx.audio.load(r))
                    .collect::<Result<_, _>>()?;
                let profile = condition_from_reference(&refs)?;
                Ok(render_record(&row, &profile, &settings.shape, derive_seed(fold_seed, &[&row.clip_id]))?)
            })?;
            Ok((row, feats))
        })
        .collect()
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationLevel {
    Base,
    DataPp,
    Tts,
    Moe,
    MoeStar,
    All,
}

impl AblationLevel {
    pub const ALL_LEVELS: [AblationLevel; 6] = [
        AblationLevel::Base,
        AblationLevel::DataPp,
        AblationLevel::Tts,
        AblationLevel::Moe,
        AblationLevel::MoeStar,
        AblationLevel::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationLevel::Base => "base",
            AblationLevel::DataPp => "data_pp",
            AblationLevel::Tts => "tts",
            AblationLevel::Moe => "moe",
            AblationLevel::MoeStar => "moe_star",
            AblationLevel::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL_LEVELS.into_iter().find(|l| l.as_str() == s)
    }

    /// The pipeline this level runs, derived from `base` (which supplies the
    /// task, training and feature settings, policies and external files).
    pub fn config(self, base: &PipelineConfig) -> Result<PipelineConfig, EvalError> {
        let policies = base.augmentation.clone().unwrap_or_default();
        let synthesis = base.synthesis.clone().unwrap_or_default();
        let mut cfg = PipelineConfig {
            experts: vec![ExpertKind::Sentence],
            moe: false,
            augmentation: None,
            synthesis: None,
            ..base.clone()
        }
        .with_external(Vec::new());
        if self >= AblationLevel::DataPp {
            cfg.augmentation = Some(policies);
        }
        if self >= AblationLevel::Tts {
            cfg.synthesis = Some(synthesis);
        }
        if self >= AblationLevel::Moe {
            cfg.experts = vec![ExpertKind::Sentence, ExpertKind::Vowel];
            cfg.moe = true;
        }
        match self {
            AblationLevel::MoeStar => {
                let tags: BTreeSet<&str> = base.external.iter().map(|r| r.provenance.as_str()).collect();
                if tags.len() < 2 {
                    return Err(EvalError::InfeasibleLevel {
                        level: self.as_str().into(),
                        reason: "needs external predictions carrying at least two distinct provenance tags".into(),
                    });
                }
                cfg = cfg.with_external(base.external.clone());
            }
            AblationLevel::All => {
                cfg.experts = vec![ExpertKind::Pooled];
                cfg.moe = false;
            }
            _ => {}
        }
        Ok(cfg)
    }
}

pub fn run_ablation(
    records: &[ClipRecord],
    ctx: &RunContext,
    base: &PipelineConfig,
    levels: &[AblationLevel],
    k: usize,
    seed: u64,
) -> Result<(AblationReport, Vec<(AblationLevel, CvOutcome)>), EvalError> {
    if levels.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let configs: Vec<(AblationLevel, PipelineConfig)> =
        levels.iter().map(|l| Ok((*l, l.config(base)?))).collect::<Result<_, EvalError>>()?;
    let mut outcomes = Vec::new();
    for (level, cfg) in configs {
        outcomes.push((level, run_cv(records, ctx, &cfg, k, seed)?));
    }
    let fold_fingerprint = outcomes[0].1.report.fold_fingerprint.clone();
    if let Some((level, _)) = outcomes.iter().find(|(_, o)| o.report.fold_fingerprint != fold_fingerprint) {
        return Err(EvalError::InvalidConfig(format!("level {} ran on different folds", level.as_str())));
    }
    let auc_of =
        |l: AblationLevel| outcomes.iter().find(|(x, _)| *x == l).and_then(|(_, o)| o.report.primary_row().mean.auc);
    let mut warnings = Vec::new();
    if let (Some(all), Some(moe)) = (auc_of(AblationLevel::All), auc_of(AblationLevel::Moe)) {
        if all > moe {
            let msg = format!("pooled `all` AUC {all:.3} exceeds `moe` AUC {moe:.3}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let report = AblationReport {
        rows: outcomes.iter().map(|(level, o)| AblationRow { level: *level, report: o.report.clone() }).collect(),
        fold_fingerprint,
        warnings,
    };
    Ok((report, outcomes))
}

// ---------------------------------------------------------------- cross-domain

/// Trains only on `train_origin` rows and tests on real rows under the usual
/// folds; `deltas` compare against the same run trained on real rows.
pub fn run_cross_domain(
    records: &[ClipRecord],
    ctx: &RunContext,
    cfg: &PipelineConfig,
    train_origin: Origin,
    test_origin: Origin,
    k: usize,
    seed: u64,
) -> Result<(CrossDomainReport, CvOutcome), EvalError> {
    if test_origin != Origin::Real {
        return Err(EvalError::InvalidConfig("the test partition must be real recordings".into()));
    }
    for (what, origin) in [("train", train_origin), ("test", test_origin)] {
        if !records.iter().any(|r| r.origin == origin) {
            return Err(EvalError::EmptyPartition(format!("no {} rows for {what}", origin.as_str())));
        }
    }
    let cross_cfg = PipelineConfig { train_origins: vec![train_origin], ..cfg.clone() };
    let reference_cfg = PipelineConfig { train_origins: vec![Origin::Real], ..cfg.clone() };
    let outcome = run_cv(records, ctx, &cross_cfg, k, seed)?;
    let reference = if cross_cfg == reference_cfg {
        outcome.report.clone()
    } else {
        run_cv(records, ctx, &reference_cfg, k, seed)?.report
    };
    let (a, b) = (&outcome.report.primary_row().mean, &reference.primary_row().mean);
    let deltas = Metrics {
        accuracy: a.accuracy - b.accuracy,
        macro_f1: a.macro_f1 - b.macro_f1,
        auc: a.auc.zip(b.auc).map(|(x, y)| x - y),
    };
    let report = CrossDomainReport { train_origin, test_origin, report: outcome.report.clone(), reference, deltas };
    Ok((report, outcome))
}

// ---------------------------------------------------------------- run directory

/// `<base>/<fingerprint>/` guarded by a lock file for its lifetime.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(base: &Path, fingerprint: &str) -> Result<Self, EvalError> {
        let path = base.join(fingerprint);
        fs::create_dir_all(&path).map_err(|e| EvalError::io(&path, e))?;
        let lock = path.join(".lock");
        fs::OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| EvalError::Io {
            path: lock.display().to_string(),
            message: format!("run directory busy: {e}"),
        })?;
        Ok(RunDir { path, lock })
    }

    pub fn feature_cache(&self) -> FeatureCache {
        FeatureCache::new(self.path.join("features"))
    }

    fn write(&self, rel: &str, text: &str) -> Result<(), EvalError> {
        let p = self.path.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
        }
        fs::write(&p, text).map_err(|e| EvalError::io(&p, e))
    }

    /// Writes folds, models, clip predictions and MoE decisions of a CV run.
    pub fn write_outcome(&self, prefix: &str, outcome: &CvOutcome) -> Result<(), EvalError> {
        self.write(
            &format!("folds/{prefix}assignment.json"),
            &serde_json::to_string_pretty(&outcome.folds).expect("serializable"),
        )?;
        for (fold, model) in &outcome.models {
            let p = self.path.join(format!("models/{prefix}fold{fold:02}-{}.vkem", model.expert_id));
            model.save(&p)?;
        }
        let mut by_fold: BTreeMap<usize, String> = BTreeMap::new();
        for (fold, p) in &outcome.predictions {
            let line = serde_json::to_string(p).expect("serializable");
            by_fold.entry(*fold).or_default().push_str(&(line + "\n"));
        }
        for (fold, text) in by_fold {
            self.write(&format!("predictions/{prefix}fold{fold:02}.jsonl"), &text)?;
        }
        let mut by_fold: BTreeMap<usize, Vec<MoeDecision>> = BTreeMap::new();
        for (fold, d) in &outcome.decisions {
            by_fold.entry(*fold).or_default().push(d.clone());
        }
        for (fold, ds) in by_fold {
            self.write(
                &format!("predictions/{prefix}fold{fold:02}-decisions.jsonl"),
                &crate::moe::decisions_to_jsonl(&ds),
            )?;
        }
        Ok(())
    }

    pub fn write_reports(&self, reports: &[Report]) -> Result<(), EvalError> {
        emit_report(reports, ReportFormat::Json, &self.path.join("report.json"))?;
        emit_report(reports, ReportFormat::Markdown, &self.path.join("report.md"))
    }

    pub fn write_config(&self, text: &str) -> Result<(), EvalError> {
        self.write("config.json", text)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(EvalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn macro_f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let m = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[1, 1], &[1, 1], 3).unwrap(), 1.0);
        assert!(matches!(macro_f1(&[], &[], 0), Err(EvalError::EmptyClassSet)));
    }

    #[test]
    fn auc_cases() {
        let pos = [true, true, false, false];
        assert_eq!(auc_binary(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), 0.0);
        assert_eq!(auc_binary(&[0.5; 4], &pos).unwrap(), 0.5);
        assert_eq!(auc_binary(&[0.9, 0.4, 0.6, 0.2], &pos).unwrap(), 0.75);
        assert!(matches!(auc_binary(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClassOnly)));
    }

    #[test]
    fn std_is_sample_std() {
        assert_eq!(sample_std(&[0.8; 10]), 0.0);
        assert_eq!(shifted_mean(&[0.8; 10]), 0.8);
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    fn speaker_rows(h: usize, p: usize) -> Vec<ClipRecord> {
        let mut out = Vec::new();
        for (label, n) in [(Label::Healthy, h), (Label::Pathological, p)] {
            for i in 0..n {
                let spk = format!("{}{i:03}", label.as_str());
                out.push(ClipRecord {
                    clip_id: format!("{spk}-sent"),
                    path: format!("{spk}.wav"),
                    dataset_id: "d".into(),
                    speaker_id: spk.clone(),
                    session_id: format!("{spk}-s1"),
                    recording_type: RecordingType::Sentence,
                    vowel_label: None,
                    label,
                    pathology_class: (label == Label::Pathological).then(|| "x".to_string()),
                    origin: Origin::Real,
                    language: "IT".into(),
                    parent_clip_id: None,
                    conditioned_on: vec![],
                    provenance: None,
                });
            }
        }
        out
    }

    #[test]
    fn folds_balance_labels() {
        let rows = speaker_rows(10, 10);
        let a = make_speaker_folds(&rows, 10, 1).unwrap();
        for f in 0..10 {
            let s = a.speakers_in(f);
            assert_eq!(s.iter().filter(|s| s.starts_with("healthy")).count(), 1);
            assert_eq!(s.len(), 2);
        }
        assert_eq!(a, make_speaker_folds(&rows, 10, 1).unwrap());
        let ipv = make_speaker_folds(&speaker_rows(173, 340), 10, 3).unwrap();
        for f in 0..10 {
            let s = ipv.speakers_in(f);
            let h = s.iter().filter(|s| s.starts_with("healthy")).count();
            assert!((17..=18).contains(&h));
            assert_eq!(s.len() - h, 34);
        }
        assert!(matches!(make_speaker_folds(&speaker_rows(9, 20), 10, 1), Err(EvalError::TooFewSpeakers { .. })));
    }

    #[test]
    fn leakage_guard_follows_parents() {
        let rows = speaker_rows(10, 10);
        let folds = make_speaker_folds(&rows, 10, 1).unwrap();
        let test_speaker = folds.speakers_in(0).into_iter().next().unwrap().to_string();
        let train_speaker = folds.speakers_in(1).into_iter().next().unwrap().to_string();
        let parent = rows.iter().find(|r| r.speaker_id == test_speaker).unwrap();
        let mut leaked = parent.clone();
        leaked.clip_id = format!("{}__aug0", parent.clip_id);
        leaked.origin = Origin::Augmented;
        leaked.parent_clip_id = Some(parent.clip_id.clone());
        leaked.speaker_id = train_speaker;
        let by_clip: HashMap<&str, &ClipRecord> = rows.iter().map(|r| (r.clip_id.as_str(), r)).collect();
        let err = check_leakage(0, &[&leaked], &folds.speakers_in(0), &by_clip).unwrap_err();
        assert!(err.is_internal());
    }

    #[test]
    fn cell_format() {
        assert_eq!(fmt_cell(Some(0.911), Some(0.029), None), "0.911 ±.029");
        assert_eq!(fmt_cell(Some(0.8), Some(0.05), Some(-0.1)), "0.800 ±.050 (-.100)");
        assert_eq!(fmt_cell(Some(0.8), Some(0.05), Some(0.012)), "0.800 ±.050 (+.012)");
        assert!(matches!(reports_to_json(&[]), Err(EvalError::EmptyReport)));
    }
}
