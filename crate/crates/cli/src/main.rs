//! `realign-lab`: corpus synthesis, supervision synthesis, training,
//! evaluation, diagnostics and reporting driven by one TOML config.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use realign_core::harness::Arm;
use realign_core::ErrorClass;

use config::{Backend, Split};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] realign_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "realign-lab", version, about = "Reasoning-guided ranking alignment lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to corpus, oracle and training (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-item parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Root directory for all artifacts (overrides `paths.out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into `<out>/corpus`.
    SynthCorpus,
    /// Build training triplets into `<out>/supervision/<backend>`.
    SynthSupervision {
        #[arg(long, value_enum)]
        backend: Option<Backend>,
    },
    /// Train one arm, or one run per value of a λ sweep.
    Train(TrainArgs),
    /// Score a checkpoint; writes metrics next to it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// NDCG/recall cutoffs, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// Embedding-space and attention diagnostics for one or more checkpoints.
    Diagnose {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Number of instances to export heatmaps for.
        #[arg(long)]
        heatmaps: Option<usize>,
    },
    /// Side-by-side comparison of every run under a directory.
    Report {
        /// Defaults to `<out>/runs`.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Run the gradient and metric oracle suites.
    Verify {
        #[arg(long, default_value_t = 34)]
        grad_cases: usize,
        #[arg(long, default_value_t = 1000)]
        metric_cases: usize,
    },
    /// Train every arm over several seeds and tabulate the comparison.
    Ablation {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_arm, default_value = "realign")]
    pub objective: Arm,
    /// One λ, or a comma-separated sweep producing one run per value.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    /// Triplet file; defaults to the backend matching the objective.
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    /// Run directory name under `<out>/runs` (single runs only).
    #[arg(long)]
    pub name: Option<String>,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse().map_err(|e: realign_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
