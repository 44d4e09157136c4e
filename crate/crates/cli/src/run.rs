//! `run` and `report`: config resolution, run directories and reports.

use std::env;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use voicekit::augment::AugmentPolicy;
use voicekit::corpus::Origin;
use voicekit::eval::{
    reports_from_json, reports_to_json, reports_to_markdown, run_ablation, run_cross_domain, run_cv, AblationLevel,
    AugmentPolicies, DirAudio, ExpertKind, PipelineConfig, Report, RunContext, RunDir, SynthesisSettings, Task,
};
use voicekit::experts::{load_external_predictions, TrainConfig};
use voicekit::moe::default_priority;
use voicekit::util::short_hash;

use crate::data::{load_manifest, read_text, write_file};
use crate::error::{CmdResult, Failure};
use crate::{FormatArg, ReportArgs, TaskArg};

pub const RUNS_DIR_ENV: &str = "VOICEKIT_RUNS_DIR";

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Built-in experts: `sentence`, `vowel`, `all`, or `none` to use only external predictions.
    #[arg(long, value_delimiter = ',')]
    pub experts: Option<Vec<String>>,
    #[arg(long, overrides_with = "no_moe")]
    pub moe: bool,
    #[arg(long)]
    pub no_moe: bool,
    /// Expert ids in tie-break order.
    #[arg(long, value_delimiter = ',')]
    pub priority: Option<Vec<String>>,
    #[arg(long, overrides_with = "no_augment")]
    pub augment: bool,
    #[arg(long)]
    pub no_augment: bool,
    /// In-fold class balancing with synthetic speakers.
    #[arg(long, overrides_with = "no_synth")]
    pub synth: bool,
    #[arg(long)]
    pub no_synth: bool,
    /// Classification experts start from a detector trained on the same fold.
    #[arg(long)]
    pub warm_start: bool,
    /// External prediction files (JSON Lines).
    #[arg(long, num_args = 1..)]
    pub external: Vec<PathBuf>,
    /// Ablation levels: base, data_pp, tts, moe, moe_star, all.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Option<Vec<String>>,
    /// `train=<origin> test=<origin>`.
    #[arg(long, num_args = 1..=2)]
    pub cross_domain: Option<Vec<String>>,
    #[arg(long)]
    pub policy_sentence: Option<PathBuf>,
    #[arg(long)]
    pub policy_vowel: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Parent of run directories (default: `$VOICEKIT_RUNS_DIR`, then `runs`).
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct CrossDomain {
    train: Origin,
    test: Origin,
}

/// Run config file; every field is optional and flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    seed: Option<u64>,
    task: Option<Task>,
    k: Option<usize>,
    experts: Option<Vec<ExpertKind>>,
    moe: Option<bool>,
    priority: Option<Vec<String>>,
    augment: Option<bool>,
    synth: Option<bool>,
    warm_start: Option<bool>,
    external: Option<Vec<PathBuf>>,
    ablate: Option<Vec<AblationLevel>>,
    cross_domain: Option<CrossDomain>,
    policy_sentence: Option<AugmentPolicy>,
    policy_vowel: Option<AugmentPolicy>,
    train: Option<TrainConfig>,
    runs_dir: Option<PathBuf>,
    jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
enum Mode {
    Cv,
    Ablation { levels: Vec<AblationLevel> },
    CrossDomain { train: Origin, test: Origin },
}

/// Everything a run depends on, dumped into the run directory.
#[derive(Debug, Serialize)]
struct Resolved {
    manifest: String,
    seed: u64,
    k: usize,
    #[serde(flatten)]
    mode: Mode,
    pipeline: PipelineConfig,
    external_files: Vec<String>,
    jobs: Option<usize>,
}

fn flag(yes: bool, no: bool) -> Option<bool> {
    match (yes, no) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

fn parse_cross_domain(tokens: &[String]) -> CmdResult<CrossDomain> {
    let (mut train, mut test) = (None, None);
    for tok in tokens.iter().flat_map(|t| t.split([',', ' '])).filter(|t| !t.is_empty()) {
        let bad = || Failure::user(format!("--cross-domain: expected train=<origin> test=<origin>, got `{tok}`"));
        let (key, value) = tok.split_once('=').ok_or_else(bad)?;
        let origin = Origin::parse(value).ok_or_else(bad)?;
        match key {
            "train" => train = Some(origin),
            "test" => test = Some(origin),
            _ => return Err(bad()),
        }
    }
    match (train, test) {
        (Some(train), Some(test)) => Ok(CrossDomain { train, test }),
        _ => Err(Failure::user("--cross-domain needs both train=<origin> and test=<origin>")),
    }
}

fn load_policy(path: &Path) -> CmdResult<AugmentPolicy> {
    let p = AugmentPolicy::from_json(&read_text(path)?)?;
    p.validate()?;
    Ok(p)
}

fn resolve(args: &RunArgs, jobs: Option<usize>) -> CmdResult<(Resolved, Option<PathBuf>)> {
    let (file, base) = match &args.config {
        Some(path) => {
            let file: RunFile = serde_json::from_str(&read_text(path)?)
                .map_err(|e| Failure::user(format!("{}: {e}", path.display())))?;
            (file, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (RunFile::default(), PathBuf::new()),
    };
    let seed = args
        .seed
        .or(file.seed)
        .ok_or_else(|| Failure::user("a seed is required (--seed or `seed` in the config file)"))?;
    let mut cfg = PipelineConfig::default();
    cfg.task = args.task.map(TaskArg::task).or(file.task).unwrap_or(cfg.task);
    if let Some(names) = &args.experts {
        cfg.experts = names
            .iter()
            .filter(|n| n.as_str() != "none")
            .map(|n| ExpertKind::parse(n).ok_or_else(|| Failure::user(format!("unknown expert `{n}`"))))
            .collect::<CmdResult<_>>()?;
    } else if let Some(e) = file.experts {
        cfg.experts = e;
    }
    cfg.moe = flag(args.moe, args.no_moe).or(file.moe).unwrap_or(cfg.moe);
    cfg.priority = args.priority.clone().or(file.priority).unwrap_or_else(default_priority);
    let sentence = match &args.policy_sentence {
        Some(p) => Some(load_policy(p)?),
        None => file.policy_sentence,
    };
    let vowel = match &args.policy_vowel {
        Some(p) => Some(load_policy(p)?),
        None => file.policy_vowel,
    };
    let defaults = AugmentPolicies::default();
    cfg.augmentation = flag(args.augment, args.no_augment).or(file.augment).unwrap_or(true).then(|| AugmentPolicies {
        sentence: sentence.unwrap_or(defaults.sentence),
        vowel: vowel.unwrap_or(defaults.vowel),
    });
    cfg.synthesis = flag(args.synth, args.no_synth).or(file.synth).unwrap_or(false).then(SynthesisSettings::default);
    cfg.warm_start = args.warm_start || file.warm_start.unwrap_or(false);
    cfg.train = file.train.unwrap_or(cfg.train);
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let external_files: Vec<PathBuf> = if args.external.is_empty() {
        file.external.unwrap_or_default().into_iter().map(|p| base.join(p)).collect()
    } else {
        args.external.clone()
    };
    let mut external = Vec::new();
    for path in &external_files {
        external.extend(load_external_predictions(path)?);
    }
    let cfg = cfg.with_external(external);

    let ablate: Option<Vec<AblationLevel>> = match &args.ablate {
        Some(names) => Some(
            names
                .iter()
                .map(|n| AblationLevel::parse(n).ok_or_else(|| Failure::user(format!("unknown ablation level `{n}`"))))
                .collect::<CmdResult<_>>()?,
        ),
        None => file.ablate,
    };
    let cross = match &args.cross_domain {
        Some(tokens) => Some(parse_cross_domain(tokens)?),
        None => file.cross_domain,
    };
    let mode = match (ablate, cross) {
        (Some(_), Some(_)) => return Err(Failure::user("--ablate and --cross-domain are separate runs")),
        (Some(levels), None) => Mode::Ablation { levels },
        (None, Some(c)) => Mode::CrossDomain { train: c.train, test: c.test },
        (None, None) => Mode::Cv,
    };
    let runs_dir = args.runs_dir.clone().or(file.runs_dir.map(|p| base.join(p)));
    let resolved = Resolved {
        manifest: args.manifest.display().to_string(),
        seed,
        k: args.k.or(file.k).unwrap_or(10),
        mode,
        pipeline: cfg,
        external_files: external_files.iter().map(|p| p.display().to_string()).collect(),
        jobs: jobs.or(file.jobs),
    };
    Ok((resolved, runs_dir))
}

pub fn run(args: &RunArgs, cli_jobs: Option<usize>) -> CmdResult {
    let (resolved, runs_dir) = resolve(args, cli_jobs)?;
    if cli_jobs.is_none() {
        if let Some(n) = resolved.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Failure::user(format!("jobs: {e}")))?;
        }
    }
    resolved.pipeline.validate()?;
    let (records, root) = load_manifest(&args.manifest)?;
    let (cfg, k, seed) = (&resolved.pipeline, resolved.k, resolved.seed);
    let fingerprint = short_hash(
        json!({ "pipeline": cfg.fingerprint(k, seed, &records), "mode": resolved.mode }).to_string().as_bytes(),
    );
    let runs_dir =
        runs_dir.or_else(|| env::var_os(RUNS_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"));
    let run_dir = RunDir::open(&runs_dir, &fingerprint)?;
    run_dir.write_config(&(serde_json::to_string_pretty(&resolved)? + "\n"))?;

    let audio = DirAudio { root };
    let ctx = RunContext { audio: &audio, cache: Some(run_dir.feature_cache()) };
    let report = match &resolved.mode {
        Mode::Cv => {
            let outcome = run_cv(&records, &ctx, cfg, k, seed)?;
            run_dir.write_outcome("", &outcome)?;
            Report::Cv(outcome.report)
        }
        Mode::Ablation { levels } => {
            let (report, outcomes) = run_ablation(&records, &ctx, cfg, levels, k, seed)?;
            for (level, outcome) in &outcomes {
                run_dir.write_outcome(&format!("{}-", level.as_str()), outcome)?;
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Report::Ablation(report)
        }
        Mode::CrossDomain { train, test } => {
            let (report, outcome) = run_cross_domain(&records, &ctx, cfg, *train, *test, k, seed)?;
            run_dir.write_outcome("", &outcome)?;
            Report::CrossDomain(report)
        }
    };
    let reports = [report];
    run_dir.write_reports(&reports)?;
    print!("{}", reports_to_markdown(&reports)?);
    eprintln!("run directory: {}", run_dir.path.display());
    Ok(())
}

pub fn report(args: &ReportArgs) -> CmdResult {
    let input = if args.input.is_dir() { args.input.join("report.json") } else { args.input.clone() };
    let reports = reports_from_json(&read_text(&input)?)?;
    let text = match args.format {
        FormatArg::Json => reports_to_json(&reports)?,
        FormatArg::Markdown => reports_to_markdown(&reports)?,
    };
    match &args.out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
