//! `popt`: command-line driver for pretraining, decoding and interpretation
//! runs on embedding stores.

mod commands;
mod config;
mod data;
mod report;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failures with their own exit codes.
#[derive(Debug)]
pub enum CliError {
    Schema(String),
    MissingFile(PathBuf),
    Diverged(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Schema(m) => write!(f, "config error: {m}"),
            CliError::MissingFile(p) => write!(f, "missing file: {}", p.display()),
            CliError::Diverged(m) => write!(f, "training diverged: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

const EXIT_OTHER: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "popt", version, about = "Population transformer runs on channel-embedding stores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Run only this seed instead of every entry of `seeds`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic subject as a store, layout, labels and manifest.
    GenSynthetic(RunArgs),
    /// Self-supervised pretraining; writes the best checkpoint and a metrics log.
    Pretrain(RunArgs),
    /// Fine-tune on the task; random weights when no checkpoint is given.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probe on frozen CLS features; random weights when no checkpoint is given.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Aggregation baseline on concatenated embeddings.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides `[baseline] kind`.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Channel-scaling or sample-efficiency curve.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Seeds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Channel-omission influence matrix of a pretrained checkpoint.
    Influence {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Scaled attention weights of a fine-tuned checkpoint.
    Attention {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Mean and standard error of every `report.csv` and `curve.csv` under a directory.
    Report {
        dir: PathBuf,
        /// Output CSV; defaults to `<dir>/summary.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum KindArg {
    Linear,
    DeepNn,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use config::BaselineName;
    match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune { run, checkpoint } => commands::finetune(&run, checkpoint.as_deref(), false),
        Command::Probe { run, checkpoint } => commands::finetune(&run, checkpoint.as_deref(), true),
        Command::Baseline { run, kind } => {
            let kind = kind.map(|k| match k {
                KindArg::Linear => BaselineName::Linear,
                KindArg::DeepNn => BaselineName::DeepNn,
            });
            commands::baseline(&run, kind)
        }
        Command::Sweep { run, checkpoint, jobs } => commands::sweep(&run, checkpoint.as_deref(), jobs),
        Command::Influence { run, checkpoint } => commands::influence(&run, &checkpoint),
        Command::Attention { run, checkpoint } => commands::attention(&run, &checkpoint),
        Command::Report { dir, out } => report::report(&dir, out.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Schema(_) => EXIT_SCHEMA,
                CliError::MissingFile(_) => EXIT_MISSING,
                CliError::Diverged(_) => EXIT_DIVERGED,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return EXIT_MISSING;
            }
        }
    }
    EXIT_OTHER
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
