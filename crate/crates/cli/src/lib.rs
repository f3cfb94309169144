//! Command-line front end: synth, train, detect, eval, ablate, gradcheck.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod experiment;

use config::Hyper;
use lama_core::detection::MetricsMode;

#[derive(Debug)]
pub enum CliError {
    /// Bad input or flags; exit code 2.
    Usage(String),
    /// Anything else; exit code 1.
    Internal(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Internal(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<lama_core::Error> for CliError {
    fn from(e: lama_core::Error) -> Self {
        use lama_core::Error as E;
        match e {
            E::Io(_) | E::Shape { .. } => CliError::Internal(e.into()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Internal(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "lama", version, about = "Next-event log anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labelled corpus from an event automaton.
    Synth(SynthArgs),
    /// Split a labelled corpus and train a detector on its normal sessions.
    Train(TrainArgs),
    /// Classify every session with a trained detector.
    Detect(DetectArgs),
    /// Score a detection report against labels, in both OOV modes.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of layer and head counts.
    Ablate(AblateArgs),
    /// Check analytic gradients of a tiny model against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output sessions file.
    #[arg(long)]
    pub sessions: PathBuf,
    /// Output labels file.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long, default_value_t = 0.03)]
    pub anomaly_rate: f64,
    /// Comma-separated anomaly kinds: swap, substitute, insert-oov, truncate.
    #[arg(long, value_delimiter = ',', default_value = "swap,substitute,insert-oov")]
    pub kinds: Vec<String>,
    /// Automaton table (`state event next prob` rows); the built-in one if absent.
    #[arg(long)]
    pub automaton: Option<PathBuf>,
    /// Also write the injection log (`session_id<TAB>kind<TAB>positions`).
    #[arg(long)]
    pub injections: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub sessions: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss history; defaults to `<out>.loss.tsv`.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    /// Write the held-out sessions of the split here.
    #[arg(long, requires = "test_labels")]
    pub test_sessions: Option<PathBuf>,
    #[arg(long, requires = "test_sessions")]
    pub test_labels: Option<PathBuf>,
    /// TOML file with the same keys as the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub sessions: PathBuf,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Scan every window instead of stopping at the first miss.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model flags, if given, must match the checkpoint; `--topk` overrides it.
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Directory for the metrics files; defaults to the report's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, requires = "labels", conflicts_with = "synthetic")]
    pub sessions: Option<PathBuf>,
    #[arg(long, requires = "sessions")]
    pub labels: Option<PathBuf>,
    /// Generate this many sessions with the built-in automaton instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    pub layers_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    pub heads_grid: Vec<usize>,
    /// Seeded repetitions per cell.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::WithoutOov)]
    pub mode: ModeArg,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    WithoutOov,
    WithOov,
}

impl From<ModeArg> for MetricsMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::WithoutOov => MetricsMode::WithoutOov,
            ModeArg::WithOov => MetricsMode::WithOov,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a).map(|_| ()),
        Command::Gradcheck(a) => commands::gradcheck(&a).map(|_| ()),
    }
}
