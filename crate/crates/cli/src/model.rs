//! Feature, training, prediction and combination commands.

use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use voicekit::corpus::ClipRecord;
use voicekit::eval::{ExpertKind, TaskClasses};
use voicekit::experts::{fine_tune, train_expert, warm_start_classifier, ExpertModel, Prediction, TrainConfig};
use voicekit::features::{mfcc, pooled_features, write_grid, FeatureCache, FeatureConfig};
use voicekit::moe::{combine_corpus, decisions_to_jsonl, default_priority};

use crate::data::{load_clip, load_manifest, read_text, write_file};
use crate::error::{CmdResult, Failure};
use crate::{CombineArgs, FeaturizeArgs, PredictArgs, TrainArgs};

/// Pooled features per record, in order, through an optional cache.
fn pooled(records: &[&ClipRecord], root: &Path, cfg: &FeatureConfig, cache: Option<&Path>) -> CmdResult<Vec<Vec<f64>>> {
    let cache = cache.map(FeatureCache::new);
    records
        .par_iter()
        .map(|r| {
            let compute = || -> CmdResult<Vec<f64>> { Ok(pooled_features(&load_clip(root, r)?, cfg)?) };
            match &cache {
                Some(c) => c.get_or_compute(&r.clip_id, cfg, compute),
                None => compute(),
            }
        })
        .collect()
}

pub fn featurize(args: &FeaturizeArgs) -> CmdResult {
    let (records, root) = load_manifest(&args.manifest)?;
    let cfg = FeatureConfig::default();
    let rows: Vec<&ClipRecord> = records.iter().collect();
    pooled(&rows, &root, &cfg, Some(&args.out))?;
    if args.matrices {
        let hash = cfg.hash();
        rows.par_iter().try_for_each(|r| -> CmdResult {
            let m = mfcc(&load_clip(&root, r)?, &cfg.frame, &cfg.mfcc)?;
            let path = args.out.join("matrices").join(&hash).join(format!("{}.vkfc", r.clip_id));
            Ok(write_grid(&path, m.n_frames, m.n_cols, &m.data, &hash)?)
        })?;
    }
    let summary = json!({ "clips": rows.len(), "config_hash": cfg.hash(), "dim": cfg.pooled_dim() });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let kind = ExpertKind::parse(&args.expert)
        .ok_or_else(|| Failure::user(format!("unknown expert type `{}` (sentence, vowel, all)", args.expert)))?;
    let (records, root) = load_manifest(&args.manifest)?;
    let task = args.task.task();
    let classes = TaskClasses::new(task, &records)?;
    let rows: Vec<&ClipRecord> = records
        .iter()
        .filter(|r| kind.recording_type().is_none_or(|t| t == r.recording_type) && classes.index(task, r).is_some())
        .collect();
    let fcfg = FeatureConfig::default();
    let x = pooled(&rows, &root, &fcfg, args.features_cache.as_deref())?;
    let y: Vec<usize> = rows.iter().map(|r| classes.index(task, r).expect("filtered")).collect();
    let mut tc = TrainConfig { seed: args.seed, ..TrainConfig::default() };
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    let hash = fcfg.hash();
    let (model, report) = match &args.warm_start_from {
        Some(det_path) => {
            let detector = ExpertModel::load(det_path)?;
            let mut model = warm_start_classifier(&detector, kind.id(), &classes.names, &hash, &tc)?;
            let report = fine_tune(&mut model, &x, &y, &tc)?;
            (model, report)
        }
        None => train_expert(kind.id(), kind.recording_type(), &hash, &classes.names, &x, &y, &tc)?,
    };
    model.save(&args.out)?;
    let summary = json!({
        "expert_id": model.expert_id,
        "classes": model.class_names,
        "n_rows": rows.len(),
        "initial_loss": report.initial(),
        "final_loss": report.last(),
        "provenance": model.provenance_tag,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub fn predict(args: &PredictArgs) -> CmdResult {
    let model = ExpertModel::load(&args.model)?;
    let (records, root) = load_manifest(&args.manifest)?;
    let fcfg = FeatureConfig::default();
    if fcfg.hash() != model.feature_hash {
        return Err(Failure::user(format!(
            "model expects feature config {}, this build computes {}",
            model.feature_hash,
            fcfg.hash()
        )));
    }
    let rows: Vec<&ClipRecord> =
        records.iter().filter(|r| model.recording_type.is_none_or(|t| t == r.recording_type)).collect();
    let x = pooled(&rows, &root, &fcfg, args.features_cache.as_deref())?;
    let mut text = String::new();
    for (r, f) in rows.iter().zip(&x) {
        let p = model.predict(&r.clip_id, f)?;
        text.push_str(&serde_json::to_string(&p)?);
        text.push('\n');
    }
    match &args.out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_predictions(path: &Path) -> CmdResult<Vec<Prediction>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Failure::user(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn combine(args: &CombineArgs) -> CmdResult {
    let (records, _) = load_manifest(&args.manifest)?;
    let mut preds = Vec::new();
    for p in &args.predictions {
        preds.extend(read_predictions(p)?);
    }
    let mut priority = args.priority.clone().unwrap_or_else(default_priority);
    let mut ids: Vec<String> = preds.iter().map(|p| p.expert_id.clone()).collect();
    ids.sort();
    ids.dedup();
    for id in ids {
        if !priority.contains(&id) {
            priority.push(id);
        }
    }
    let decisions = combine_corpus(&preds, &records, &priority)?;
    let text = decisions_to_jsonl(&decisions);
    match &args.out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
