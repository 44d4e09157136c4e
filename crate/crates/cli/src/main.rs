//! `voicekit` command-line front end.

mod data;
mod error;
mod model;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{CmdResult, Failure};

#[derive(Parser, Debug)]
#[command(name = "voicekit", version, about = "Voice-disorder detection and classification toolkit")]
struct Cli {
    /// Worker threads for parallel maps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a manifest; diagnostics go to stderr as JSON Lines.
    Validate(ValidateArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
    /// Join WAV files into one clip at 16 kHz.
    Concat(ConcatArgs),
    /// Generate a preset corpus or balance an existing manifest with synthetic clips.
    Synth(SynthArgs),
    /// Write augmented variants of the real and synthetic clips of a manifest.
    Augment(AugmentArgs),
    /// Cache pooled MFCC features (and optionally full matrices).
    Featurize(FeaturizeArgs),
    /// Train one built-in expert on a whole manifest.
    Train(TrainArgs),
    /// Clip predictions of a saved expert, as JSON Lines.
    Predict(PredictArgs),
    /// Per-session entropy-based selection over prediction files.
    Combine(CombineArgs),
    /// Cross-validated evaluation, ablation or cross-domain run.
    Run(Box<run::RunArgs>),
    /// Re-render a saved report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ValidateArgs {
    manifest: PathBuf,
    /// Directory clip paths are relative to (default: the manifest's directory).
    #[arg(long)]
    root: Option<PathBuf>,
    /// Skip the check that every referenced WAV exists.
    #[arg(long)]
    no_audio: bool,
}

#[derive(Args, Debug)]
struct StatsArgs {
    manifest: PathBuf,
    #[arg(long)]
    root: Option<PathBuf>,
    /// Read every WAV to report the mean duration.
    #[arg(long)]
    durations: bool,
}

#[derive(Args, Debug)]
struct ConcatArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KeyArg {
    Label,
    PathologyClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProfileSource {
    /// Condition each new speaker on a real speaker of the same class.
    Reference,
    /// Sample each new speaker from the class preset.
    Presets,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OriginArg {
    Real,
    Synthetic,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Class presets as JSON (default: built-in presets).
    #[arg(long)]
    presets: Option<PathBuf>,
    /// Generate a fresh preset corpus instead of balancing a manifest.
    #[arg(long, conflicts_with = "manifest")]
    desk: bool,
    /// Manifest to balance.
    #[arg(long, required_unless_present = "desk")]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "label")]
    key: KeyArg,
    #[arg(long = "from", value_enum, default_value = "reference")]
    profiles: ProfileSource,
    /// Healthy speakers of a desk corpus.
    #[arg(long, default_value_t = 30)]
    n_healthy: usize,
    /// Speakers per pathological class of a desk corpus.
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long, value_delimiter = ',', default_value = "hyperfunctional,breathy,tremor")]
    classes: Vec<String>,
    #[arg(long, value_enum, default_value = "real")]
    origin: OriginArg,
    /// Speaker id prefix (default: `spk` for desk corpora, `syn` otherwise).
    #[arg(long)]
    prefix: Option<String>,
    #[arg(long, default_value = "desk")]
    dataset: String,
    #[arg(long, default_value_t = 8)]
    n_syllables: usize,
    #[arg(long, default_value_t = 1.0)]
    vowel_duration: f64,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    policy_sentence: Option<PathBuf>,
    #[arg(long)]
    policy_vowel: Option<PathBuf>,
    /// Ambient noise WAV (default: white noise).
    #[arg(long)]
    noise_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Cache directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-frame MFCC matrices under `<out>/matrices/`.
    #[arg(long)]
    matrices: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Detection,
    Classification,
}

impl TaskArg {
    fn task(self) -> voicekit::eval::Task {
        match self {
            TaskArg::Detection => voicekit::eval::Task::Detection,
            TaskArg::Classification => voicekit::eval::Task::Classification,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `sentence`, `vowel` or `all`.
    #[arg(long = "type", default_value = "sentence")]
    expert: String,
    #[arg(long, value_enum, default_value = "detection")]
    task: TaskArg,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Detection model to warm-start a classifier from.
    #[arg(long)]
    warm_start_from: Option<PathBuf>,
    #[arg(long)]
    features_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    features_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CombineArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    predictions: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    priority: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Markdown,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// `report.json` or a run directory holding one.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> CmdResult<i32> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::user(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Validate(a) => data::validate(&a),
        Command::Stats(a) => data::stats(&a).map(|_| 0),
        Command::Concat(a) => data::concat(&a).map(|_| 0),
        Command::Synth(a) => data::synth(&a).map(|_| 0),
        Command::Augment(a) => data::augment(&a).map(|_| 0),
        Command::Featurize(a) => model::featurize(&a).map(|_| 0),
        Command::Train(a) => model::train(&a).map(|_| 0),
        Command::Predict(a) => model::predict(&a).map(|_| 0),
        Command::Combine(a) => model::combine(&a).map(|_| 0),
        Command::Run(a) => run::run(&a, cli.jobs).map(|_| 0),
        Command::Report(a) => run::report(&a).map(|_| 0),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
