//! Manifest, audio, synthesis and augmentation commands.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use voicekit::audio::{concat as concat_clips, load_wav, save_wav, AudioClip};
use voicekit::augment::{apply_policy, AugmentPolicy, NoiseSource};
use voicekit::corpus::{
    corpus_stats, corpus_stats_with_durations, parse_manifest_str, resolve_path, validate_manifest_str, write_manifest,
    ClipRecord, CorpusError, Origin, RecordingType,
};
use voicekit::synthgen::{
    condition_from_reference, default_presets, desk_corpus, find_preset, plan_balancing, plan_records,
    presets_from_json, render_record, sample_profile, BalanceKey, ClassPreset, DeskCorpusConfig, RenderShape,
    SynthError, VoiceProfile,
};
use voicekit::util::derive_seed;

use crate::error::{CmdResult, Failure};
use crate::{AugmentArgs, ConcatArgs, KeyArg, OriginArg, ProfileSource, StatsArgs, SynthArgs, ValidateArgs};

pub fn read_text(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

/// Parsed manifest and the directory its clip paths are relative to.
pub fn load_manifest(path: &Path) -> CmdResult<(Vec<ClipRecord>, PathBuf)> {
    let records = parse_manifest_str(&read_text(path)?)?;
    Ok((records, manifest_root(path)))
}

pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_clip(root: &Path, record: &ClipRecord) -> CmdResult<AudioClip> {
    let clip = load_wav(&resolve_path(root, record))?;
    Ok(clip.with_id(record.clip_id.clone()).to_canonical()?)
}

pub fn write_file(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("value serializes"));
}

fn diagnostic(e: &CorpusError) -> Value {
    let mut d = json!({ "kind": e.kind(), "line": e.line(), "message": e.to_string() });
    match e {
        CorpusError::SchemaViolation { field, .. } => d["field"] = json!(field),
        CorpusError::DuplicateClipId { clip_id, first_line, .. } => {
            d["clip_id"] = json!(clip_id);
            d["first_line"] = json!(first_line);
        }
        CorpusError::ConflictingSpeakerLabel { speaker_id, first_line, .. } => {
            d["speaker_id"] = json!(speaker_id);
            d["first_line"] = json!(first_line);
        }
        CorpusError::ConflictingSessionSpeaker { session_id, first_line, .. } => {
            d["session_id"] = json!(session_id);
            d["first_line"] = json!(first_line);
        }
        CorpusError::Io { path, .. } => d["path"] = json!(path),
    }
    d
}

pub fn validate(args: &ValidateArgs) -> CmdResult<i32> {
    let text = read_text(&args.manifest)?;
    let (records, errors) = validate_manifest_str(&text);
    let mut diags: Vec<Value> = errors.iter().map(diagnostic).collect();
    if !args.no_audio {
        let root = args.root.clone().unwrap_or_else(|| manifest_root(&args.manifest));
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            if let Ok(r) = serde_json::from_str::<ClipRecord>(raw) {
                lines.entry(r.clip_id).or_insert(i + 1);
            }
        }
        for r in &records {
            let path = resolve_path(&root, r);
            if !path.is_file() {
                diags.push(json!({
                    "kind": "missing_file",
                    "line": lines.get(&r.clip_id),
                    "clip_id": r.clip_id,
                    "path": path.display().to_string(),
                    "message": format!("clip `{}` references missing file {}", r.clip_id, path.display()),
                }));
            }
        }
    }
    diags.sort_by_key(|d| d["line"].as_u64().unwrap_or(0));
    for d in &diags {
        eprintln!("{d}");
    }
    Ok(if diags.is_empty() { 0 } else { 1 })
}

pub fn stats(args: &StatsArgs) -> CmdResult {
    let (records, default_root) = load_manifest(&args.manifest)?;
    let root = args.root.clone().unwrap_or(default_root);
    let stats = if args.durations {
        corpus_stats_with_durations(&records, |r| load_wav(&resolve_path(&root, r)).ok().map(|c| c.duration_s()))
    } else {
        corpus_stats(&records)
    };
    print_json(&serde_json::to_value(stats)?);
    Ok(())
}

pub fn concat(args: &ConcatArgs) -> CmdResult {
    let clips: Vec<AudioClip> = args.inputs.iter().map(|p| load_wav(p)).collect::<Result<_, _>>()?;
    let id = args.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let joined = concat_clips(&id, &clips)?;
    save_wav(&joined, &args.out)?;
    print_json(&json!({ "clip_id": id, "inputs": clips.len(), "duration_s": joined.duration_s() }));
    Ok(())
}

fn load_presets(path: Option<&Path>) -> CmdResult<Vec<ClassPreset>> {
    match path {
        Some(p) => Ok(presets_from_json(&read_text(p)?)?),
        None => Ok(default_presets()),
    }
}

fn write_clips(out: &Path, items: &[(ClipRecord, AudioClip)]) -> CmdResult {
    items.par_iter().try_for_each(|(r, clip)| save_wav(clip, &out.join(&r.path)))?;
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CmdResult {
    let presets = load_presets(args.presets.as_deref())?;
    let shape =
        RenderShape { vowel_duration_s: args.vowel_duration, n_syllables: args.n_syllables, ..RenderShape::default() };
    match &args.manifest {
        None => synth_desk(args, &presets, shape),
        Some(manifest) => synth_balance(args, manifest, &presets, shape),
    }
}

fn synth_desk(args: &SynthArgs, presets: &[ClassPreset], shape: RenderShape) -> CmdResult {
    let cfg = DeskCorpusConfig {
        seed: args.seed,
        dataset_id: args.dataset.clone(),
        speaker_prefix: args.prefix.clone().unwrap_or_else(|| "spk".into()),
        origin: match args.origin {
            OriginArg::Real => Origin::Real,
            OriginArg::Synthetic => Origin::Synthetic,
        },
        n_healthy: args.n_healthy,
        pathological: args.classes.iter().map(|c| (c.clone(), args.per_class)).collect(),
        shape,
        ..DeskCorpusConfig::default()
    };
    let items = desk_corpus(&cfg, presets)?;
    write_clips(&args.out, &items)?;
    let records: Vec<ClipRecord> = items.into_iter().map(|(r, _)| r).collect();
    let manifest = args.out.join("manifest.jsonl");
    write_manifest(&manifest, &records).map_err(|e| Failure::io(&manifest, e))?;
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in &records {
        let class = r.pathology_class.clone().unwrap_or_else(|| r.label.as_str().to_string());
        *counts.entry(r.recording_type.as_str().into()).or_default().entry(class).or_default() += 1;
    }
    print_json(&json!({ "generated": counts, "total": records.len(), "manifest": manifest.display().to_string() }));
    Ok(())
}

/// Preset for a planned class; under the label key pathological speakers
/// cycle through every non-healthy preset.
fn preset_for<'a>(presets: &'a [ClassPreset], key: BalanceKey, class: &str, i: usize) -> CmdResult<&'a ClassPreset> {
    let found = match (key, class) {
        (BalanceKey::Label, "pathological") => {
            let pathological: Vec<&ClassPreset> = presets.iter().filter(|p| p.class_name != "healthy").collect();
            (!pathological.is_empty()).then(|| pathological[i % pathological.len()])
        }
        _ => find_preset(presets, class),
    };
    found.ok_or_else(|| SynthError::InvalidPreset(format!("no preset for class `{class}`")).into())
}

fn synth_balance(args: &SynthArgs, manifest: &Path, presets: &[ClassPreset], shape: RenderShape) -> CmdResult {
    let (records, root) = load_manifest(manifest)?;
    let key = match args.key {
        KeyArg::Label => BalanceKey::Label,
        KeyArg::PathologyClass => BalanceKey::PathologyClass,
    };
    let real: Vec<ClipRecord> = records.iter().filter(|r| r.origin == Origin::Real).cloned().collect();
    let plan = plan_balancing(&real, key);
    let prefix = args.prefix.clone().unwrap_or_else(|| "syn".into());
    let mut rows = plan_records(&plan, key, &real, &prefix);

    // Donor speakers per (type, class), sorted for determinism.
    let mut donors: BTreeMap<(RecordingType, String), Vec<&str>> = BTreeMap::new();
    for r in &real {
        if let Some(class) = key.class_of(r) {
            let list = donors.entry((r.recording_type, class)).or_default();
            if !list.contains(&r.speaker_id.as_str()) {
                list.push(&r.speaker_id);
            }
        }
    }
    for list in donors.values_mut() {
        list.sort_unstable();
    }

    let mut jobs: Vec<(ClipRecord, VoiceProfile)> = Vec::with_capacity(rows.len());
    let mut index_in_class: BTreeMap<(RecordingType, String), usize> = BTreeMap::new();
    for row in rows.drain(..) {
        let class = key.class_of(&row).unwrap_or_default();
        let slot = index_in_class.entry((row.recording_type, class.clone())).or_default();
        let i = *slot;
        *slot += 1;
        let (profile, row) = match args.profiles {
            ProfileSource::Presets => {
                let preset = preset_for(presets, key, &class, i)?;
                let profile = sample_profile(preset, derive_seed(args.seed, &[&row.speaker_id]));
                let provenance = Some(format!("preset:{}", preset.class_name));
                (profile, ClipRecord { provenance, ..row })
            }
            ProfileSource::Reference => {
                let pool =
                    donors.get(&(row.recording_type, class.clone())).filter(|p| !p.is_empty()).ok_or_else(|| {
                        Failure::from(SynthError::InvalidPreset(format!(
                            "no real speaker of class `{class}` to condition on"
                        )))
                    })?;
                let donor = pool[(derive_seed(args.seed, &["donor", &row.clip_id]) % pool.len() as u64) as usize];
                let refs: Vec<AudioClip> = real
                    .iter()
                    .filter(|r| r.speaker_id == donor && r.recording_type == row.recording_type)
                    .map(|r| load_clip(&root, r))
                    .collect::<CmdResult<_>>()?;
                let profile = condition_from_reference(&refs)?;
                let row = ClipRecord {
                    conditioned_on: vec![donor.to_string()],
                    provenance: Some(format!("conditioned:{donor}")),
                    ..row
                };
                (profile, row)
            }
        };
        jobs.push((row, profile));
    }
    let items: Vec<(ClipRecord, AudioClip)> = jobs
        .into_par_iter()
        .map(|(r, profile)| {
            let clip = render_record(&r, &profile, &shape, derive_seed(args.seed, &[&r.clip_id]))?;
            Ok((r, clip))
        })
        .collect::<Result<_, SynthError>>()?;
    write_clips(&args.out, &items)?;
    let new_rows: Vec<ClipRecord> = items.into_iter().map(|(r, _)| r).collect();
    let out_manifest = args.out.join("manifest.jsonl");
    write_manifest(&out_manifest, &new_rows).map_err(|e| Failure::io(&out_manifest, e))?;
    print_json(
        &json!({ "generated": plan.counts, "total": plan.total(), "manifest": out_manifest.display().to_string() }),
    );
    Ok(())
}

fn load_policy(path: Option<&Path>, rtype: RecordingType) -> CmdResult<AugmentPolicy> {
    let policy = match path {
        Some(p) => AugmentPolicy::from_json(&read_text(p)?)?,
        None => AugmentPolicy::for_type(rtype),
    };
    policy.validate()?;
    Ok(policy)
}

pub fn augment(args: &AugmentArgs) -> CmdResult {
    let (records, root) = load_manifest(&args.manifest)?;
    let sentence = load_policy(args.policy_sentence.as_deref(), RecordingType::Sentence)?;
    let vowel = load_policy(args.policy_vowel.as_deref(), RecordingType::Vowel)?;
    let noise = match &args.noise_file {
        Some(p) => NoiseSource::from_file(p)?,
        None => NoiseSource::White,
    };
    let sources: Vec<&ClipRecord> = records.iter().filter(|r| r.origin != Origin::Augmented).collect();
    let produced: Vec<Vec<ClipRecord>> = sources
        .par_iter()
        .map(|r| {
            let policy = match r.recording_type {
                RecordingType::Sentence => &sentence,
                RecordingType::Vowel => &vowel,
            };
            let clip = load_clip(&root, r)?;
            let variants = apply_policy(&clip, r, policy, &noise, args.seed)?;
            variants
                .into_iter()
                .map(|(clip, row)| {
                    save_wav(&clip, &args.out.join(&row.path))?;
                    Ok(row)
                })
                .collect::<CmdResult<Vec<_>>>()
        })
        .collect::<CmdResult<_>>()?;
    let rows: Vec<ClipRecord> = produced.into_iter().flatten().collect();
    let out_manifest = args.out.join("manifest.jsonl");
    write_manifest(&out_manifest, &rows).map_err(|e| Failure::io(&out_manifest, e))?;
    print_json(
        &json!({ "sources": sources.len(), "generated": rows.len(), "manifest": out_manifest.display().to_string() }),
    );
    Ok(())
}
