use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use pddm_cli::config::read_config;
use pddm_cli::{Invocation, RunManifest, Split};
use pddm_core::trainer::load_checkpoint;
use pddm_core::{SynthConfig, TrainConfig};

/// Position-dependent deep metric learning on tabular features.
///
/// Log verbosity follows PDDM_LOG (error, warn, info, debug, trace).
#[derive(Debug, Parser)]
#[command(name = "pddm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic heterogeneous dataset as CSV.
    GenData {
        /// TOML file with synthetic-data settings.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint, step history and manifest.
    Train {
        /// TOML file with training settings; defaults to the checkpoint's when resuming.
        #[arg(long, required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recall@K, score distributions and NCM accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ks: Vec<usize>,
        /// Which classes of the data file to evaluate on, using the checkpoint's split.
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with PDDM mining and with Euclidean mining and compare the runs.
    MineCompare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Repeat the run recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Write to this location instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(command: Command) -> Result<Invocation> {
    Ok(match command {
        Command::GenData { config, out, seed } => {
            let mut config: SynthConfig = read_config(&config)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            Invocation::GenData { config, out }
        }
        Command::Train {
            config,
            data,
            out,
            checkpoint,
            seed,
        } => {
            let mut config: TrainConfig = match (&config, &checkpoint) {
                (Some(path), _) => read_config(path)?,
                (None, Some(ckpt)) => load_checkpoint(ckpt)?.config,
                (None, None) => unreachable!("clap requires one of --config and --checkpoint"),
            };
            if let Some(s) = seed {
                config.seed = s;
            }
            Invocation::Train {
                config,
                data,
                out,
                resume: checkpoint,
            }
        }
        Command::Eval {
            checkpoint,
            data,
            ks,
            split,
            out,
        } => Invocation::Eval {
            checkpoint,
            data,
            ks,
            split,
            out,
        },
        Command::MineCompare {
            config,
            data,
            out,
            seed,
        } => {
            let mut config: TrainConfig = read_config(&config)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            Invocation::MineCompare { config, data, out }
        }
        Command::Rerun { manifest, out } => {
            let m = RunManifest::read(&manifest)?;
            m.verify_inputs().context("cannot rerun")?;
            match out {
                Some(out) => m.invocation.with_out(out),
                None => m.invocation,
            }
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PDDM_LOG", "warn")).init();
    let cli = Cli::parse();
    match resolve(cli.command).and_then(|inv| inv.run()) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            println!("manifest: {}", outcome.manifest_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
