use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use relia::commands;
use relia::config::{BalanceChoice, LossChoice, Overrides, RunConfig};
use relia_core::parallel;

#[derive(Parser)]
#[command(name = "relia", version, about = "Ensemble audio screening with uncertainty triage")]
struct Cli {
    /// Flat JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ensemble size.
    #[arg(long, global = true)]
    members: Option<usize>,
    /// Cross-validation folds.
    #[arg(long, global = true)]
    folds: Option<usize>,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossChoice>,
    #[arg(long, global = true, value_enum)]
    balance: Option<BalanceChoice>,
    /// Corpus SNR for `synthetic`, augmentation SNR otherwise.
    #[arg(long = "snr-db", global = true, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    /// Uncertainty quantile used as the triage threshold.
    #[arg(long, global = true)]
    quantile: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one log-mel spectrogram per manifest entry plus an index.
    Featurize {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Stratified k-fold training of deep ensembles with an evaluation report.
    TrainEnsemble {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a manifest with a saved ensemble.
    Predict {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a labeled manifest and report AUC and triage accuracy.
    Evaluate {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate a chirp-in-noise corpus as WAV files and a manifest.
    Synthetic {
        #[arg(long)]
        n_pos: Option<usize>,
        #[arg(long)]
        n_neg: Option<usize>,
    },
    /// Cross-validate every loss and balancing combination.
    Grid {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let manifest = match &cli.command {
        Command::Featurize { manifest }
        | Command::TrainEnsemble { manifest }
        | Command::Predict { manifest, .. }
        | Command::Evaluate { manifest, .. }
        | Command::Grid { manifest } => manifest.clone(),
        Command::Synthetic { .. } => None,
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        members: cli.members,
        folds: cli.folds,
        loss: cli.loss,
        balance: cli.balance,
        snr_db: cli.snr_db,
        quantile: cli.quantile,
        manifest,
    };
    cfg.apply(&overrides, matches!(cli.command, Command::Synthetic { .. }));

    let requested = cfg.workers.or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()));
    let workers = match (requested, parallel::workers_from_env()) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    parallel::configure_workers(workers);

    match cli.command {
        Command::Featurize { .. } => {
            let summary = commands::featurize_cmd(&cfg)?;
            eprintln!("wrote {} spectrograms", summary.written);
            if !summary.failures.is_empty() {
                for (name, err) in &summary.failures {
                    eprintln!("error: {name}: {err}");
                }
                eprintln!("{} file(s) failed", summary.failures.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::TrainEnsemble { .. } => {
            let report = commands::train_ensemble_cmd(&cfg)?;
            eprintln!(
                "pooled AUC {:.4}, fold mean {:.4} ± {:.4}",
                report.auc,
                report.fold_mean.unwrap_or(f64::NAN),
                report.fold_std.unwrap_or(f64::NAN)
            );
        }
        Command::Predict { ensemble, .. } => {
            let n = commands::predict_cmd(&cfg, &ensemble)?;
            eprintln!("scored {n} files");
        }
        Command::Evaluate { ensemble, .. } => {
            let report = commands::evaluate_cmd(&cfg, &ensemble)?;
            eprintln!("AUC {:.4}", report.auc);
        }
        Command::Synthetic { n_pos, n_neg } => {
            if let Some(n) = n_pos {
                cfg.synth_pos = n;
            }
            if let Some(n) = n_neg {
                cfg.synth_neg = n;
            }
            let path = commands::synthetic_cmd(&cfg)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Grid { .. } => {
            let rows = commands::grid_cmd(&cfg)?;
            eprintln!("wrote {} grid rows", rows.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
