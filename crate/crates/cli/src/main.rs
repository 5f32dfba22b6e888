mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

/// Localise unseen objects in partially observed scenes.
#[derive(Debug, Parser)]
#[command(name = "scg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus: train/test scenes, knowledge snapshot and embeddings.
    GenSynth(GenSynthArgs),
    /// Train a proximity prediction network.
    Train(TrainArgs),
    /// Score a checkpoint on a scene file.
    Evaluate(EvaluateArgs),
    /// Localise one target in one scene.
    Localise(LocaliseArgs),
    /// Fit and score a reference predictor.
    Baseline(BaselineArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Training scenes.
    #[arg(long)]
    pub scenes: usize,
    /// Test scenes, generated after the training ones.
    #[arg(long, default_value_t = 300)]
    pub test_scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by every command that builds a model.
#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Knowledge snapshot (TSV).
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Embedding table (text).
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// Comma-separated edge kinds to keep: proximity,atlocation,usedfor.
    #[arg(long)]
    pub ablate_edges: Option<String>,
    /// Use only the last round's states in the distance head.
    #[arg(long)]
    pub no_concat: bool,
    /// Message-passing rounds.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Override a config key, e.g. `--set localiser.cutoff=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training scenes (JSON lines); a validation split is held out.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Key-value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Best-validation checkpoint; the final one and the epoch log go next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds both initialisation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Scenes to score (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Report file; the completeness table goes to `<report>.bins.tsv`.
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub flags: ModelFlags,
}

#[derive(Debug, Args)]
pub struct LocaliseArgs {
    /// Scene file (JSON lines).
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub scene_id: String,
    /// Target category.
    #[arg(long)]
    pub target: String,
    /// Predict distances with this checkpoint.
    #[arg(long, conflicts_with = "oracle_distances", required_unless_present = "oracle_distances")]
    pub model: Option<PathBuf>,
    /// Use exact distances to one ground-truth instance instead of a model.
    #[arg(long)]
    pub oracle_distances: bool,
    /// Ground-truth instance used with --oracle-distances.
    #[arg(long, default_value_t = 0)]
    pub instance: usize,
    /// JSON record file; defaults to `<scene-id>.<target>.localise.json`.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ModelFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineKind {
    Mean,
    Median,
    Mode,
    Mlp,
    MlpCs,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
    /// Scenes the baseline is fitted on.
    #[arg(long)]
    pub train: PathBuf,
    /// Scenes to score.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Knowledge snapshot, required by mlp-cs.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Write the fitted statistics table here (statistics kinds only).
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Key-value config file (train.* and localiser.* keys apply).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hidden widths of the MLP.
    #[arg(long, value_delimiter = ',', default_values_t = scg_core::baselines::DEFAULT_HIDDEN)]
    pub hidden: Vec<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Localise(a) => commands::localise(&a),
        Command::Baseline(a) => commands::baseline(&a),
        Command::Gradcheck => commands::gradcheck(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
