//! `tweak`: operator CLI for the open-set RF authentication pipeline.
//!
//! Subcommands mirror the pipeline stages: synth data, train the model,
//! calibrate per-device balls, decide on captures, evaluate portability
//! matrices, and merge reports across runs. Set `TWEAK_WORKERS` to cap
//! the worker thread count.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tweak_core::{Error, Result};

use config::{ExperimentConfig, SizeSpec};

#[derive(Parser)]
#[command(name = "tweak", version, about = "Open-set RF device authentication pipeline")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the config's root seed.
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic IQ datasets for every domain in the roster.
    Synth {
        /// Override the config's output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },

    /// Train the embedding model on the train domain's enrollment split.
    Train {
        /// Override the config's output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,

        /// Also train a reference classifier ("vanilla").
        #[arg(long, value_name = "NAME")]
        baseline: Option<String>,
    },

    /// Build per-domain calibration tables from a checkpoint.
    Calibrate {
        /// Model checkpoint. Defaults to the run's trained checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,

        /// Domain to calibrate on (repeatable). Defaults to the train domain.
        #[arg(long = "domain", value_name = "ID")]
        domains: Vec<String>,

        /// Per-device calibration size: a count or a percentage like "10%".
        #[arg(long, value_name = "N")]
        n: Option<String>,

        /// Merge the per-domain tables into one multi-domain calibration.
        #[arg(long)]
        merge: bool,

        /// Directory for the calibration files.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },

    /// Decide admit/reject for batches of frames from one raw IQ capture.
    Decide {
        /// Model checkpoint. Defaults to the run's trained checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,

        /// Calibration file (single table or merged multi-domain).
        #[arg(long, value_name = "FILE")]
        calibration: PathBuf,

        /// Raw IQ capture; its .meta.json sidecar must sit beside it.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,

        /// Frames per decision batch. Defaults to the config's M.
        #[arg(long, value_name = "M")]
        m: Option<usize>,

        /// Decisions file (JSON lines); stdout when omitted.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },

    /// Run the calibrate x test portability matrix end to end.
    Evaluate {
        /// Override the config's output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },

    /// Merge matrix CSVs from several runs into one table keyed by run id.
    Report {
        /// Run directories, each holding results/matrix.csv.
        #[arg(required = true, value_name = "DIR")]
        runs: Vec<PathBuf>,

        /// Merged CSV file; stdout when omitted.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    init_workers()?;

    if let Command::Report { runs, out } = &cli.command {
        return commands::cmd_report(runs, out.as_deref());
    }

    let config_path = cli.config.as_deref().ok_or_else(|| {
        Error::InvalidInput("--config is required for this command".into())
    })?;
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::Synth { out } => {
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            commands::cmd_synth(&cfg)
        }
        Command::Train { out, baseline } => {
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            commands::cmd_train(&cfg, baseline.as_deref())
        }
        Command::Calibrate {
            checkpoint,
            domains,
            n,
            merge,
            out,
        } => {
            let n_spec = n.as_deref().map(SizeSpec::parse).transpose()?;
            commands::cmd_calibrate(
                &cfg,
                checkpoint.as_deref(),
                &domains,
                n_spec,
                merge,
                out.as_deref(),
            )
        }
        Command::Decide {
            checkpoint,
            calibration,
            input,
            m,
            out,
        } => commands::cmd_decide(
            &cfg,
            checkpoint.as_deref(),
            &calibration,
            &input,
            m,
            out.as_deref(),
        ),
        Command::Evaluate { out } => {
            if let Some(dir) = out {
                cfg.out_dir = dir;
            }
            commands::cmd_evaluate(&cfg)
        }
        Command::Report { .. } => unreachable!("handled before config load"),
    }
}

/// Honor the TWEAK_WORKERS override before any parallel work starts.
fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var("TWEAK_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        Error::InvalidInput(format!(
            "TWEAK_WORKERS must be a positive integer, got {raw:?}"
        ))
    })?;
    if n == 0 {
        return Err(Error::InvalidInput(
            "TWEAK_WORKERS must be a positive integer, got 0".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("worker pool setup failed: {e}")))
}
