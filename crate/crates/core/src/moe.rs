//! Entropy-based selection between per-type experts at session level.
//!
//! Each expert's clip predictions within a session are averaged; the session
//! decision takes the expert whose averaged distribution has the lowest
//! entropy (hard selection). Exact ties go to the earlier expert in the
//! priority list. Raw entropies are compared without any calibration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ClipRecord;
use crate::experts::Prediction;

pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MoeError {
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("predictions disagree on class names")]
    InconsistentClassNames,
    #[error("no predictions to combine")]
    EmptyGroup,
    #[error("expert {0} missing from the priority list")]
    UnrankedExpert(String),
    #[error("prediction for unknown clip {0}")]
    UnknownClipId(String),
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64, MoeError> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(MoeError::NotNormalized(sum));
    }
    Ok(-probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
}

/// Mean of one expert's probability vectors; `clip_id` of the result is the
/// first input's unless `id` is given.
pub fn aggregate_within_expert(preds: &[Prediction], id: Option<&str>) -> Result<Prediction, MoeError> {
    let first = preds.first().ok_or(MoeError::EmptyGroup)?;
    if preds.iter().any(|p| p.class_names != first.class_names || p.expert_id != first.expert_id) {
        return Err(MoeError::InconsistentClassNames);
    }
    if preds.len() == 1 {
        let mut out = first.clone();
        if let Some(id) = id {
            out.clip_id = id.to_string();
        }
        return Ok(out);
    }
    let k = first.probs.len();
    let mut mean = vec![0.0; k];
    for p in preds {
        mean.iter_mut().zip(&p.probs).for_each(|(m, v)| *m += v);
    }
    let n = preds.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let total: f64 = mean.iter().sum();
    mean.iter_mut().for_each(|m| *m /= total);
    Ok(Prediction {
        clip_id: id.unwrap_or(&first.clip_id).to_string(),
        expert_id: first.expert_id.clone(),
        probs: mean,
        class_names: first.class_names.clone(),
    })
}

/// Per-session predictions, at most one per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionGroup {
    pub session_id: String,
    pub speaker_id: String,
    pub predictions: BTreeMap<String, Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeDecision {
    pub session_id: String,
    pub speaker_id: String,
    pub chosen_expert_id: String,
    pub entropies: BTreeMap<String, f64>,
    pub probs: Vec<f64>,
    pub class_names: Vec<String>,
    pub tie_broken: bool,
}

/// Sentence before vowel.
pub fn default_priority() -> Vec<String> {
    vec!["sentence".to_string(), "vowel".to_string()]
}

pub fn select_prediction(group: &SessionGroup, priority: &[String]) -> Result<MoeDecision, MoeError> {
    let first = group.predictions.values().next().ok_or(MoeError::EmptyGroup)?;
    let mut entropies = BTreeMap::new();
    for (expert, pred) in &group.predictions {
        if pred.class_names != first.class_names {
            return Err(MoeError::InconsistentClassNames);
        }
        if !priority.contains(expert) {
            return Err(MoeError::UnrankedExpert(expert.clone()));
        }
        entropies.insert(expert.clone(), entropy(&pred.probs)?);
    }
    let min = entropies.values().cloned().fold(f64::INFINITY, f64::min);
    let tied: Vec<&String> =
        priority.iter().filter(|e| entropies.get(*e).is_some_and(|h| h - min < TIE_TOLERANCE)).collect();
    let chosen = tied[0].clone();
    let pred = &group.predictions[&chosen];
    Ok(MoeDecision {
        session_id: group.session_id.clone(),
        speaker_id: group.speaker_id.clone(),
        chosen_expert_id: chosen,
        entropies,
        probs: pred.probs.clone(),
        class_names: pred.class_names.clone(),
        tie_broken: tied.len() > 1,
    })
}

/// Session groups built from clip predictions; sorted by session id.
pub fn group_sessions(predictions: &[Prediction], manifest: &[ClipRecord]) -> Result<Vec<SessionGroup>, MoeError> {
    let by_clip: BTreeMap<&str, &ClipRecord> = manifest.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    let mut sessions: BTreeMap<&str, (&str, BTreeMap<&str, Vec<Prediction>>)> = BTreeMap::new();
    for p in predictions {
        let rec = by_clip.get(p.clip_id.as_str()).ok_or_else(|| MoeError::UnknownClipId(p.clip_id.clone()))?;
        sessions
            .entry(rec.session_id.as_str())
            .or_insert_with(|| (rec.speaker_id.as_str(), BTreeMap::new()))
            .1
            .entry(p.expert_id.as_str())
            .or_default()
            .push(p.clone());
    }
    sessions
        .into_iter()
        .map(|(session, (speaker, experts))| {
            let predictions = experts
                .into_iter()
                .map(|(e, mut preds)| {
                    preds.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
                    Ok((e.to_string(), aggregate_within_expert(&preds, Some(session))?))
                })
                .collect::<Result<_, MoeError>>()?;
            Ok(SessionGroup { session_id: session.to_string(), speaker_id: speaker.to_string(), predictions })
        })
        .collect()
}

pub fn combine_corpus(
    predictions: &[Prediction],
    manifest: &[ClipRecord],
    priority: &[String],
) -> Result<Vec<MoeDecision>, MoeError> {
    group_sessions(predictions, manifest)?.iter().map(|g| select_prediction(g, priority)).collect()
}

/// Audit dump, one JSON object per decision.
pub fn decisions_to_jsonl(decisions: &[MoeDecision]) -> String {
    decisions
        .iter()
        .map(|d| {
            serde_json::json!({
                "session_id": d.session_id,
                "chosen_expert": d.chosen_expert_id,
                "entropies": d.entropies,
                "probs": d.probs,
                "tie_broken": d.tie_broken,
            })
            .to_string()
                + "\n"
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Origin, RecordingType};

    fn pred(clip: &str, expert: &str, probs: &[f64]) -> Prediction {
        Prediction {
            clip_id: clip.into(),
            expert_id: expert.into(),
            probs: probs.to_vec(),
            class_names: vec!["healthy".into(), "pathological".into()],
        }
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.9, 0.1]).unwrap() - 0.325083).abs() < 1e-6);
        assert!(entropy(&[f64::NAN, 1.0]).is_err());
        assert!(entropy(&[f64::NAN; 2]).is_err());
        assert!(matches!(entropy(&[0.5, 0.4]), Err(MoeError::NotNormalized(_))));
    }

    #[test]
    fn aggregation() {
        let single = pred("a", "e", &[0.3, 0.7]);
        assert_eq!(aggregate_within_expert(std::slice::from_ref(&single), None).unwrap(), single);
        let sym = aggregate_within_expert(&[pred("a", "e", &[1.0, 0.0]), pred("b", "e", &[0.0, 1.0])], None).unwrap();
        assert_eq!(sym.probs, vec![0.5, 0.5]);
        let three = aggregate_within_expert(
            &[pred("a", "e", &[0.8, 0.2]), pred("b", "e", &[0.6, 0.4]), pred("c", "e", &[0.7, 0.3])],
            None,
        )
        .unwrap();
        assert!((three.probs[0] - 0.7).abs() < 1e-12 && (three.probs[1] - 0.3).abs() < 1e-12);
        let mut other = pred("d", "e", &[0.5, 0.5]);
        other.class_names.reverse();
        assert_eq!(aggregate_within_expert(&[single, other], None), Err(MoeError::InconsistentClassNames));
    }

    fn group(entries: &[(&str, &[f64])]) -> SessionGroup {
        SessionGroup {
            session_id: "s".into(),
            speaker_id: "p".into(),
            predictions: entries.iter().map(|(e, p)| (e.to_string(), pred("s", e, p))).collect(),
        }
    }

    #[test]
    fn selection_rules() {
        let prio = vec!["A".to_string(), "B".to_string()];
        let d = select_prediction(&group(&[("A", &[0.9, 0.1]), ("B", &[0.6, 0.4])]), &prio).unwrap();
        assert_eq!(d.chosen_expert_id, "A");
        assert!(!d.tie_broken);
        let d = select_prediction(&group(&[("B", &[0.5, 0.5]), ("A", &[0.5, 0.5])]), &prio).unwrap();
        assert_eq!((d.chosen_expert_id.as_str(), d.tie_broken), ("A", true));
        let d = select_prediction(&group(&[("B", &[0.2, 0.8])]), &prio).unwrap();
        assert_eq!((d.chosen_expert_id.as_str(), d.tie_broken), ("B", false));
        assert_eq!(select_prediction(&group(&[]), &prio), Err(MoeError::EmptyGroup));
        assert!(matches!(select_prediction(&group(&[("C", &[0.5, 0.5])]), &prio), Err(MoeError::UnrankedExpert(_))));
    }

    fn rec(clip: &str, session: &str, rtype: RecordingType) -> ClipRecord {
        ClipRecord {
            clip_id: clip.into(),
            path: format!("{clip}.wav"),
            dataset_id: "d".into(),
            speaker_id: format!("spk-{session}"),
            session_id: session.into(),
            recording_type: rtype,
            vowel_label: None,
            label: Label::Healthy,
            pathology_class: None,
            origin: Origin::Real,
            language: "IT".into(),
            parent_clip_id: None,
            conditioned_on: vec![],
            provenance: None,
        }
    }

    #[test]
    fn corpus_grouping() {
        let manifest = vec![
            rec("s1-sent", "s1", RecordingType::Sentence),
            rec("s1-a", "s1", RecordingType::Vowel),
            rec("s1-i", "s1", RecordingType::Vowel),
            rec("s1-u", "s1", RecordingType::Vowel),
            rec("s0-sent", "s0", RecordingType::Sentence),
        ];
        let preds = vec![
            pred("s1-sent", "sentence", &[0.6, 0.4]),
            pred("s1-a", "vowel", &[0.9, 0.1]),
            pred("s1-i", "vowel", &[0.95, 0.05]),
            pred("s1-u", "vowel", &[0.85, 0.15]),
            pred("s0-sent", "sentence", &[0.2, 0.8]),
        ];
        let out = combine_corpus(&preds, &manifest, &default_priority()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].session_id, "s0");
        assert_eq!(out[0].probs, vec![0.2, 0.8]);
        assert_eq!(out[1].chosen_expert_id, "vowel");
        assert!((out[1].probs[0] - 0.9).abs() < 1e-12);
        let unknown = vec![pred("nope", "sentence", &[0.5, 0.5])];
        assert_eq!(
            combine_corpus(&unknown, &manifest, &default_priority()),
            Err(MoeError::UnknownClipId("nope".into()))
        );
        let dump = decisions_to_jsonl(&out);
        assert_eq!(dump.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
        assert_eq!(first["chosen_expert"], "sentence");
    }
}
