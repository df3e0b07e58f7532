//! `mdat-lab`: train, sweep, gradient-check and export.
//!
//! Exit codes: 0 success, 1 bad config or input, 2 training diverged,
//! 3 gradient check failed, 4 file I/O failed.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mdat-lab", version, about = "Max-margin domain-adversarial training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its logs and artifacts.
    Train(TrainArgs),
    /// Train over a one-parameter grid and several seeds.
    Sweep(SweepArgs),
    /// Finite-difference check of every training objective.
    Gradcheck(GradcheckArgs),
    /// Write artifacts for a saved checkpoint.
    Export(ExportArgs),
}

/// Flags that override values from `--config`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    margin: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    epochs: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    batch: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    seed: Option<String>,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", allow_hyphen_values = true)]
    set: Vec<String>,
    /// Record per-epoch wall time in the log.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct OutArgs {
    /// Output root; defaults to $MDAT_LAB_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Export {
    /// Predicted class over a lattice of 2-D inputs (moons only).
    Boundary,
    /// Latent features of the test splits.
    Embeddings,
    /// Input and reconstructed test images as PGM (glyphs only).
    Reconstructions,
    /// Model parameters. Training always writes one.
    Checkpoint,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, value_enum, value_delimiter = ',')]
    export: Vec<Export>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
    /// `param: v1,v2,...`, e.g. `alpha: 0.01,0.1,1`.
    #[arg(long)]
    grid: String,
    /// Seeds per grid value, counting up from the configured seed.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Runs trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Random cases per objective.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint written by `train`.
    checkpoint: PathBuf,
    /// Config of the run; defaults to config.txt next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    export: Vec<Export>,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Divergence(String),
    Gradcheck(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Divergence(_) => 2,
            Failure::Gradcheck(_) => 3,
            Failure::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Divergence(m) | Failure::Gradcheck(m) | Failure::Io(m) => m,
        }
    }
}

impl From<mdat_core::Error> for Failure {
    fn from(e: mdat_core::Error) -> Self {
        use mdat_core::Error;
        match e {
            Error::Divergence { .. } => Failure::Divergence(e.to_string()),
            Error::Io(_) => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are config errors; help and version are not errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a.cfg, &a.out, &a.export),
        Command::Sweep(a) => commands::sweep(&a.cfg, &a.out, &a.grid, a.repeats, a.jobs),
        Command::Gradcheck(a) => commands::gradcheck(&a.out, a.seeds),
        Command::Export(a) => commands::export(&a.checkpoint, a.config.as_deref(), &a.out, &a.export),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mdat-lab: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
