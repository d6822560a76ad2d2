mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Config, ConfigError};

#[derive(Parser)]
#[command(
    name = "oicsr",
    version,
    about = "Out-in-channel sparsity regularization and channel pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// `KEY=VALUE`, where KEY is `section.field` or a field name unique to one section.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--override train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, ConfigError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        Config::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch; writes checkpoint, metrics.csv, energy.csv and the resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a trained checkpoint with fine-tuning between iterations.
    Prune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report eval accuracy, FLOPs and parameters of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge prune runs into accuracy-vs-FLOPs and energy-histogram CSV/SVG files.
    Report {
        /// Run directories produced by `prune`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { cfg, out } => commands::cmd_train(&cfg.load()?, &out),
        Command::Prune {
            cfg,
            checkpoint,
            out,
        } => commands::cmd_prune(&cfg.load()?, &checkpoint, &out),
        Command::Eval {
            cfg,
            checkpoint,
            out,
        } => commands::cmd_eval(&cfg.load()?, &checkpoint, out.as_ref()),
        Command::Report { runs, out, bins } => {
            if bins == 0 {
                return Err(ConfigError("--bins must be at least 1".into()).into());
            }
            report::cmd_report(&runs, &out, bins)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
