//! Dataset manifests (JSON-Lines), validation and corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordingType {
    Sentence,
    Vowel,
}

impl RecordingType {
    pub const ALL: [RecordingType; 2] = [RecordingType::Sentence, RecordingType::Vowel];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordingType::Sentence => "sentence",
            RecordingType::Vowel => "vowel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sentence" => Some(RecordingType::Sentence),
            "vowel" => Some(RecordingType::Vowel),
            _ => None,
        }
    }
}

impl fmt::Display for RecordingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vowel {
    A,
    E,
    I,
    O,
    U,
}

impl Vowel {
    pub const ALL: [Vowel; 5] = [Vowel::A, Vowel::E, Vowel::I, Vowel::O, Vowel::U];

    pub fn as_str(self) -> &'static str {
        match self {
            Vowel::A => "a",
            Vowel::E => "e",
            Vowel::I => "i",
            Vowel::O => "o",
            Vowel::U => "u",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Vowel::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Pathological,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Pathological => "pathological",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "healthy" => Some(Label::Healthy),
            "pathological" => Some(Label::Pathological),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
    Augmented,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
            Origin::Augmented => "augmented",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Origin::Real),
            "synthetic" => Some(Origin::Synthetic),
            "augmented" => Some(Origin::Augmented),
            _ => None,
        }
    }
}

/// One manifest row.
///
/// The lineage fields (`parent_clip_id`, `conditioned_on`, `provenance`) are
/// optional extensions used by augmented and synthetic rows; fold assignment
/// and the leakage guard follow them back to real speakers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub path: String,
    pub dataset_id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub recording_type: RecordingType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vowel_label: Option<Vowel>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathology_class: Option<String>,
    pub origin: Origin,
    pub language: String,
    /// Source clip of an augmented row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_clip_id: Option<String>,
    /// Real speakers whose recordings conditioned a synthetic row.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditioned_on: Vec<String>,
    /// Free-form note, e.g. the augmentation ops and their parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: schema violation on `{field}`: {message}")]
    SchemaViolation { line: usize, field: String, message: String },
    #[error("line {line}: clip_id `{clip_id}` already defined on line {first_line}")]
    DuplicateClipId { clip_id: String, first_line: usize, line: usize },
    #[error("line {line}: speaker `{speaker_id}` labeled differently on line {first_line}")]
    ConflictingSpeakerLabel { speaker_id: String, first_line: usize, line: usize },
    #[error("line {line}: session `{session_id}` already belongs to another speaker (line {first_line})")]
    ConflictingSessionSpeaker { session_id: String, first_line: usize, line: usize },
    #[error("cannot read manifest {path}: {message}")]
    Io { path: String, message: String },
}

impl CorpusError {
    pub fn kind(&self) -> &'static str {
        match self {
            CorpusError::SchemaViolation { .. } => "schema_violation",
            CorpusError::DuplicateClipId { .. } => "duplicate_clip_id",
            CorpusError::ConflictingSpeakerLabel { .. } => "conflicting_speaker_label",
            CorpusError::ConflictingSessionSpeaker { .. } => "conflicting_session_speaker",
            CorpusError::Io { .. } => "io",
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            CorpusError::SchemaViolation { line, .. }
            | CorpusError::DuplicateClipId { line, .. }
            | CorpusError::ConflictingSpeakerLabel { line, .. }
            | CorpusError::ConflictingSessionSpeaker { line, .. } => Some(*line),
            CorpusError::Io { .. } => None,
        }
    }
}

fn violation(line: usize, field: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::SchemaViolation { line, field: field.to_string(), message: message.into() }
}

const REQUIRED_STRINGS: [&str; 6] = ["clip_id", "path", "dataset_id", "speaker_id", "session_id", "language"];

/// Field-level validation of a single JSON line.
fn parse_line(line_no: usize, text: &str) -> Result<ClipRecord, CorpusError> {
    let value: Value = serde_json::from_str(text).map_err(|e| violation(line_no, "<line>", e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| violation(line_no, "<line>", "record is not a JSON object"))?;
    for field in REQUIRED_STRINGS {
        match obj.get(field) {
            Some(Value::String(s)) if !s.is_empty() => {}
            Some(Value::String(_)) => return Err(violation(line_no, field, "must not be empty")),
            Some(_) => return Err(violation(line_no, field, "must be a string")),
            None => return Err(violation(line_no, field, "missing")),
        }
    }
    let enum_field = |field: &str, allowed: &[&str]| -> Result<(), CorpusError> {
        match obj.get(field) {
            Some(Value::String(s)) if allowed.contains(&s.as_str()) => Ok(()),
            Some(other) => Err(violation(line_no, field, format!("expected one of {allowed:?}, found {other}"))),
            None => Err(violation(line_no, field, "missing")),
        }
    };
    enum_field("recording_type", &["sentence", "vowel"])?;
    enum_field("label", &["healthy", "pathological"])?;
    enum_field("origin", &["real", "synthetic", "augmented"])?;
    let optional_string = |field: &str| -> Result<Option<&str>, CorpusError> {
        match obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(violation(line_no, field, "must be a string or null")),
        }
    };
    let vowel = optional_string("vowel_label")?;
    if let Some(v) = vowel {
        if Vowel::parse(v).is_none() {
            return Err(violation(line_no, "vowel_label", format!("unknown vowel `{v}`")));
        }
    }
    let pathology = optional_string("pathology_class")?;
    optional_string("parent_clip_id")?;
    optional_string("provenance")?;
    if let Some(list) = obj.get("conditioned_on") {
        let ok = list.as_array().is_some_and(|a| a.iter().all(Value::is_string));
        if !ok {
            return Err(violation(line_no, "conditioned_on", "must be a list of strings"));
        }
    }

    let is_vowel = obj["recording_type"] == "vowel";
    if is_vowel && vowel.is_none() {
        return Err(violation(line_no, "vowel_label", "required when recording_type is vowel"));
    }
    if !is_vowel && vowel.is_some() {
        return Err(violation(line_no, "vowel_label", "only allowed when recording_type is vowel"));
    }
    if pathology.is_some() && obj["label"] != "pathological" {
        return Err(violation(line_no, "pathology_class", "requires label pathological"));
    }
    serde_json::from_value(value.clone()).map_err(|e| violation(line_no, "<line>", e.to_string()))
}

/// Parses manifest text, collecting every violation instead of stopping at the first.
///
/// Returns the records that parsed cleanly alongside all diagnostics.
pub fn validate_manifest_str(text: &str) -> (Vec<ClipRecord>, Vec<CorpusError>) {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut clip_lines: HashMap<String, usize> = HashMap::new();
    let mut speaker_labels: HashMap<String, (Label, usize)> = HashMap::new();
    let mut session_speakers: HashMap<String, (String, usize)> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record = match parse_line(line, raw) {
            Ok(r) => r,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        if let Some(&first_line) = clip_lines.get(&record.clip_id) {
            errors.push(CorpusError::DuplicateClipId { clip_id: record.clip_id.clone(), first_line, line });
            continue;
        }
        clip_lines.insert(record.clip_id.clone(), line);
        match speaker_labels.get(&record.speaker_id) {
            Some(&(label, first_line)) if label != record.label => {
                errors.push(CorpusError::ConflictingSpeakerLabel {
                    speaker_id: record.speaker_id.clone(),
                    first_line,
                    line,
                });
                continue;
            }
            Some(_) => {}
            None => {
                speaker_labels.insert(record.speaker_id.clone(), (record.label, line));
            }
        }
        match session_speakers.get(&record.session_id) {
            Some((speaker, first_line)) if *speaker != record.speaker_id => {
                errors.push(CorpusError::ConflictingSessionSpeaker {
                    session_id: record.session_id.clone(),
                    first_line: *first_line,
                    line,
                });
                continue;
            }
            Some(_) => {}
            None => {
                session_speakers.insert(record.session_id.clone(), (record.speaker_id.clone(), line));
            }
        }
        records.push(record);
    }
    (records, errors)
}

pub fn parse_manifest_str(text: &str) -> Result<Vec<ClipRecord>, CorpusError> {
    let (records, mut errors) = validate_manifest_str(text);
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(errors.swap_remove(0))
    }
}

pub fn parse_manifest(path: &Path) -> Result<Vec<ClipRecord>, CorpusError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CorpusError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_manifest_str(&text)
}

pub fn serialize_manifest(records: &[ClipRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serialize_manifest(records))
}

/// Resolves a record's audio path against the manifest directory.
pub fn resolve_path(root: &Path, record: &ClipRecord) -> PathBuf {
    let p = Path::new(&record.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_healthy_speakers: usize,
    pub n_pathological_speakers: usize,
    pub n_sentence_clips: usize,
    pub n_vowel_clips: usize,
    pub n_pathology_classes: usize,
    /// Mean duration over the clips whose audio could be resolved.
    pub mean_duration_s: Option<f64>,
}

pub fn corpus_stats(records: &[ClipRecord]) -> CorpusStats {
    let mut speakers: BTreeMap<&str, Label> = BTreeMap::new();
    let mut classes: BTreeSet<&str> = BTreeSet::new();
    let (mut sentences, mut vowels) = (0, 0);
    for r in records {
        speakers.insert(&r.speaker_id, r.label);
        if let Some(c) = &r.pathology_class {
            classes.insert(c);
        }
        match r.recording_type {
            RecordingType::Sentence => sentences += 1,
            RecordingType::Vowel => vowels += 1,
        }
    }
    let healthy = speakers.values().filter(|l| **l == Label::Healthy).count();
    CorpusStats {
        n_healthy_speakers: healthy,
        n_pathological_speakers: speakers.len() - healthy,
        n_sentence_clips: sentences,
        n_vowel_clips: vowels,
        n_pathology_classes: classes.len(),
        mean_duration_s: None,
    }
}

/// Statistics plus mean duration, using `duration` to resolve each clip.
pub fn corpus_stats_with_durations(
    records: &[ClipRecord],
    duration: impl Fn(&ClipRecord) -> Option<f64>,
) -> CorpusStats {
    let mut stats = corpus_stats(records);
    let durations: Vec<f64> = records.iter().filter_map(duration).collect();
    if !durations.is_empty() {
        stats.mean_duration_s = Some(durations.iter().sum::<f64>() / durations.len() as f64);
    }
    stats
}

/// Conjunctive record filter; `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusFilter {
    pub dataset: Option<String>,
    pub recording_type: Option<RecordingType>,
    pub origin: Option<Origin>,
    pub label: Option<Label>,
}

impl CorpusFilter {
    pub fn matches(&self, r: &ClipRecord) -> bool {
        self.dataset.as_ref().is_none_or(|d| *d == r.dataset_id)
            && self.recording_type.is_none_or(|t| t == r.recording_type)
            && self.origin.is_none_or(|o| o == r.origin)
            && self.label.is_none_or(|l| l == r.label)
    }
}

pub fn filter_corpus(records: &[ClipRecord], filter: &CorpusFilter) -> Vec<ClipRecord> {
    records.iter().filter(|r| filter.matches(r)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(clip: &str, speaker: &str, rtype: &str, vowel: Option<&str>, label: &str) -> String {
        let vowel = vowel.map(|v| format!(",\"vowel_label\":\"{v}\"")).unwrap_or_default();
        format!(
            "{{\"clip_id\":\"{clip}\",\"path\":\"{clip}.wav\",\"dataset_id\":\"ipv\",\"speaker_id\":\"{speaker}\",\"session_id\":\"{speaker}-s1\",\"recording_type\":\"{rtype}\"{vowel},\"label\":\"{label}\",\"origin\":\"real\",\"language\":\"IT\"}}"
        )
    }

    #[test]
    fn three_valid_lines() {
        let text = [
            line("c1", "s1", "sentence", None, "healthy"),
            line("c2", "s1", "vowel", Some("a"), "healthy"),
            line("c3", "s2", "vowel", Some("i"), "pathological"),
        ]
        .join("\n");
        let records = parse_manifest_str(&text).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[2].vowel_label, Some(Vowel::I));
    }

    #[test]
    fn vowel_without_label_is_schema_violation() {
        let text = line("c1", "s1", "vowel", None, "healthy");
        match parse_manifest_str(&text) {
            Err(CorpusError::SchemaViolation { line, field, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "vowel_label");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conflicting_speaker_labels() {
        let mut lines = vec![line("c1", "s1", "sentence", None, "healthy")];
        for i in 2..9 {
            lines.push(line(&format!("x{i}"), &format!("o{i}"), "sentence", None, "healthy"));
        }
        lines.push(line("c9", "s1", "vowel", Some("a"), "pathological"));
        let err = parse_manifest_str(&lines.join("\n")).unwrap_err();
        assert_eq!(err, CorpusError::ConflictingSpeakerLabel { speaker_id: "s1".into(), first_line: 1, line: 9 });
    }

    #[test]
    fn duplicate_clip_names_both_lines() {
        let text =
            [line("c1", "s1", "sentence", None, "healthy"), line("c1", "s1", "vowel", Some("a"), "healthy")].join("\n");
        let (_, errors) = validate_manifest_str(&text);
        assert_eq!(errors, vec![CorpusError::DuplicateClipId { clip_id: "c1".into(), first_line: 1, line: 2 }]);
    }

    #[test]
    fn pathology_class_requires_pathological() {
        let text = line("c1", "s1", "sentence", None, "healthy")
            .replace("\"origin\"", "\"pathology_class\":\"nodules\",\"origin\"");
        assert!(matches!(
            parse_manifest_str(&text),
            Err(CorpusError::SchemaViolation { ref field, .. }) if field == "pathology_class"
        ));
    }

    #[test]
    fn bad_enum_and_missing_field() {
        let text = line("c1", "s1", "whisper", None, "healthy");
        assert!(matches!(
            parse_manifest_str(&text),
            Err(CorpusError::SchemaViolation { ref field, .. }) if field == "recording_type"
        ));
        let text = line("c1", "s1", "sentence", None, "healthy").replace("\"language\":\"IT\"", "\"x\":1");
        assert!(matches!(
            parse_manifest_str(&text),
            Err(CorpusError::SchemaViolation { ref field, .. }) if field == "language"
        ));
        assert!(matches!(parse_manifest_str("not json"), Err(CorpusError::SchemaViolation { line: 1, .. })));
    }

    #[test]
    fn stats_small_cases() {
        assert_eq!(
            corpus_stats(&[]),
            CorpusStats {
                n_healthy_speakers: 0,
                n_pathological_speakers: 0,
                n_sentence_clips: 0,
                n_vowel_clips: 0,
                n_pathology_classes: 0,
                mean_duration_s: None
            }
        );
        let mut lines = Vec::new();
        for (s, label) in [("s1", "healthy"), ("s2", "pathological")] {
            lines.push(line(&format!("{s}-sent"), s, "sentence", None, label));
            for v in ["a", "i", "u"] {
                lines.push(line(&format!("{s}-{v}"), s, "vowel", Some(v), label));
            }
        }
        let records = parse_manifest_str(&lines.join("\n")).unwrap();
        let stats = corpus_stats(&records);
        assert_eq!(stats.n_sentence_clips, 2);
        assert_eq!(stats.n_vowel_clips, 6);
        assert_eq!(stats.n_healthy_speakers, 1);
        assert_eq!(stats.n_pathological_speakers, 1);
        let with = corpus_stats_with_durations(&records, |_| Some(2.0));
        assert_eq!(with.mean_duration_s, Some(2.0));
    }

    #[test]
    fn filters_compose() {
        let mut lines = Vec::new();
        for i in 0..10 {
            if i < 4 {
                lines.push(line(&format!("c{i}"), &format!("s{i}"), "vowel", Some("a"), "healthy"));
            } else {
                lines.push(line(&format!("c{i}"), &format!("s{i}"), "sentence", None, "pathological"));
            }
        }
        let records = parse_manifest_str(&lines.join("\n")).unwrap();
        let vowels =
            filter_corpus(&records, &CorpusFilter { recording_type: Some(RecordingType::Vowel), ..Default::default() });
        assert_eq!(vowels.len(), 4);
        let synthetic =
            filter_corpus(&records, &CorpusFilter { origin: Some(Origin::Synthetic), ..Default::default() });
        assert!(synthetic.is_empty());
        let none = filter_corpus(
            &records,
            &CorpusFilter {
                recording_type: Some(RecordingType::Vowel),
                label: Some(Label::Pathological),
                ..Default::default()
            },
        );
        assert!(none.is_empty());
    }
}
