//! Command-line driver for the stcl pipeline.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config or inputs),
//! 2 runtime failure.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pipeline::{Context, SweepKind};

#[derive(Parser)]
#[command(
    name = "stcl",
    version,
    about = "Stationarity-aware temporal contrastive learning for time series"
)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root; each run writes into <out>/<config-hash>-s<seed>/.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Dataset manifest, overriding [data].manifest from the config.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sweep {
    Beta,
    AdfThreshold,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from the [data.synth] section.
    GenSynth {
        /// Write the packed binary values file instead of text.
        #[arg(long)]
        binary_values: bool,
    },
    /// Write a per-segment stationarity report for the configured dataset.
    Adf,
    /// Self-supervised pretraining; writes a training log and checkpoints.
    Pretrain {
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a linear probe on frozen embeddings and report test metrics.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Audit false-negative pairs, comparing the stationarity-aware policy
    /// with the random-negative baseline on the same batch schedule.
    FnpReport,
    /// Re-train the probe at decreasing label fractions.
    LabelCurve {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export one embedding row per segment.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep pretrain+probe+audit over a hyperparameter grid.
    Grid {
        #[arg(long, value_enum)]
        sweep: Sweep,
    },
}

fn run(cli: Cli) -> stcl::Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| stcl::Error::config("--config is required"))?;
    let ctx = Context::new(&config_path, cli.seed, &cli.out, cli.manifest)?;
    match cli.command {
        Command::GenSynth { binary_values } => pipeline::cmd_gen_synth(&ctx, binary_values),
        Command::Adf => pipeline::cmd_adf(&ctx),
        Command::Pretrain { resume } => {
            pipeline::cmd_pretrain(&ctx, resume.as_deref()).map(|_| ())
        }
        Command::Probe { checkpoint } => pipeline::cmd_probe(&ctx, &checkpoint).map(|_| ()),
        Command::FnpReport => pipeline::cmd_fnp_report(&ctx).map(|_| ()),
        Command::LabelCurve { checkpoint } => pipeline::cmd_label_curve(&ctx, &checkpoint),
        Command::Embed { checkpoint } => pipeline::cmd_embed(&ctx, &checkpoint),
        Command::Grid { sweep } => {
            let kind = match sweep {
                Sweep::Beta => SweepKind::Beta,
                Sweep::AdfThreshold => SweepKind::AdfThreshold,
            };
            pipeline::cmd_grid(&ctx, kind)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap already names the offending token
            eprint!("{}", e);
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
