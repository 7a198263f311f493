use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod overrides;

use overrides::ConfigOverrides;

/// Cross-modal fusion text recognizer: synthetic data, training, evaluation
/// and diagnostics.
#[derive(Debug, Parser)]
#[command(name = "cmfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic word-image dataset.
    GenData(GenData),
    /// Train a model and write a checkpoint plus a metrics log.
    Train(Train),
    /// Report sequence accuracy of the visual, language and fused heads.
    Eval(Eval),
    /// Read one image and print what each head sees.
    Recognize(Recognize),
    /// Compare every backward rule and the full model with finite differences.
    GradCheck(GradCheck),
}

#[derive(Debug, clap::Args)]
pub struct GenData {
    /// Number of samples.
    #[arg(long = "n")]
    pub count: usize,
    /// Distortion preset: regular, irregular or none.
    #[arg(long, default_value = "irregular")]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub min_len: usize,
    #[arg(long, default_value_t = 6)]
    pub max_len: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
}

#[derive(Debug, clap::Args)]
pub struct Train {
    /// Dataset file from `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write (rewritten after every epoch).
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// `key=value` config file; flags win on conflict.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Zero the visual cues fed to the language module.
    NoVisualCues,
}

#[derive(Debug, clap::Args)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
}

#[derive(Debug, clap::Args)]
pub struct Recognize {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Binary PGM or PPM image; resized to the model input if needed.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub image: Option<PathBuf>,
    /// Dataset file; recognizes the sample at `--index`.
    #[arg(long, requires = "index")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Write one attention PGM per character position into this directory.
    #[arg(long, value_name = "DIR")]
    pub dump_attn: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
}

#[derive(Debug, clap::Args)]
pub struct GradCheck {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the full-model check.
    #[arg(long)]
    pub kernels_only: bool,
    /// Corrupt the backward rule of the named op (harness self-test).
    #[arg(long, hide = true, value_name = "OP")]
    pub inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Recognize(a) => commands::recognize(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
