//! `volcast`: generate or ingest surface series, train and evaluate the
//! forecasters, and plot their daily errors.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 training divergence.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use volcast_core::error::Error;
use volcast_core::models::ModelKind;
use volcast_core::surface::{ingest_quotes, read_quotes, save_series, synthetic_series, KnotAxes};
use volcast_core::train::experiment::{
    read_daily_csv, write_daily_plots, write_evaluation, write_train_log, OutputPaths,
};
use volcast_core::train::{prepare_dataset, run_experiment, train_kind, Checkpoint, ExperimentConfig, SummaryRow};

/// Overrides `output_dir` from the config file.
const OUTPUT_ENV: &str = "VOLCAST_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "volcast", version, about = "Implied-volatility surface forecasting")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Output directory; beats VOLCAST_OUTPUT_DIR and the config file.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic series described by the config's `synthetic.*` keys.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate a quotes CSV onto the knot grid and write a series file.
    Ingest {
        #[arg(long)]
        quotes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes its checkpoint and training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: ModelKind,
    },
    /// Score a checkpoint and the persistence baseline on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Draw daily vol and call MAPE charts from `<model>_daily.csv` files.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for `daily_vol_mape.svg` and `daily_call_mape.svg`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every configured model plus the baseline.
    RunAll {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Path, output_dir: &Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|d| !d.is_empty()) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<12} {:>14} {:>15}", "model", "vol_mape_pct", "call_mape_pct");
    for r in rows {
        println!("{:<12} {:>14.4} {:>15.4}", r.model, r.vol_mape_pct, r.call_mape_pct);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenerateData { config, out } => {
            let cfg = match config {
                Some(p) => load_config(p, &cli.output_dir)?,
                None => ExperimentConfig::default(),
            };
            let series = synthetic_series(&cfg.synthetic, cfg.data_seed)?;
            save_series(out, &series)?;
            println!("wrote {} days to {}", series.len(), out.display());
        }
        Command::Ingest { quotes, out } => {
            let file = File::open(quotes).map_err(|e| Error::Io {
                path: quotes.clone(),
                source: e,
            })?;
            let quotes = read_quotes(BufReader::new(file))?;
            let series = ingest_quotes(&quotes, &KnotAxes::standard())?;
            save_series(out, &series)?;
            println!("wrote {} days to {}", series.len(), out.display());
        }
        Command::Train { config, model } => {
            let cfg = load_config(config, &cli.output_dir)?;
            let data = prepare_dataset(&cfg)?;
            let out = OutputPaths::new(&cfg.output_dir)?;
            let ckpt = out.checkpoint(model.name());
            let trained = train_kind(&cfg, *model, &data, Some(&ckpt))?;
            write_train_log(&out.train_log(model.name()), &trained.outcome.log)?;
            println!(
                "{model}: best epoch {} (validation MAPE {:.4}%), checkpoint {}",
                trained.outcome.best_epoch,
                trained.outcome.best_val_loss,
                ckpt.display()
            );
        }
        Command::Evaluate { config, checkpoint } => {
            let cfg = load_config(config, &cli.output_dir)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            if ckpt.window != cfg.window {
                return Err(Error::config(format!(
                    "checkpoint was trained with window {} but the config uses {}",
                    ckpt.window, cfg.window
                )));
            }
            let model = ckpt.restore()?;
            let data = prepare_dataset(&cfg)?;
            let out = OutputPaths::new(&cfg.output_dir)?;
            let daily = write_evaluation(&out, &data, &[&*model], cfg.call_percentile)?;
            print_summary(&daily.iter().map(|(n, d)| SummaryRow::from_daily(n, d)).collect::<Vec<_>>());
        }
        Command::Plot { inputs, out } => {
            let mut daily = Vec::new();
            for path in inputs {
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().trim_end_matches("_daily").to_string())
                    .unwrap_or_default();
                daily.push((name, read_daily_csv(path)?));
            }
            std::fs::create_dir_all(out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_daily_plots(out, &daily)?;
            println!("wrote daily_vol_mape.svg and daily_call_mape.svg to {}", out.display());
        }
        Command::RunAll { config } => {
            let cfg = load_config(config, &cli.output_dir)?;
            let report = run_experiment(&cfg)?;
            print_summary(&report.summary);
            println!("outputs in {}", report.output_dir.display());
        }
    }
    Ok(())
}
