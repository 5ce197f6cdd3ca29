//! Command-line front end. Exit codes: 0 success, 1 configuration or usage
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dbs_core::resampling::{class_distribution, distribution_from_counts, ClassDistribution, ResampleSummary};
use serde::Serialize;

use crate::config::{ExperimentConfig, KEYS};
use crate::data::{load_dataset, prepare, LoadReport};
use crate::error::{HarnessError, Result};
use crate::experiments::{compare_optimizers, sensitivity_sweep, train_seeds, ComparisonReport};
use crate::report::{emit_report, read_report, render_text, REPORT_FILE};

#[derive(Debug, Parser)]
#[command(name = "dbs", version, about = "Optimizer comparison on imbalanced sequence classification")]
pub struct Cli {
    /// Flat `key = value` config file (see `dbs keys`).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set optimizer=...`.
    #[arg(long, global = true)]
    pub optimizer: Option<String>,
    /// Shorthand for `--set seed=...` (a single run seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Shorthand for `--set ema_beta=...`.
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Shorthand for `--set alpha=...`.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Shorthand for `--set output_dir=...`.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Suppress the summary printed to stdout.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured optimizer on each seed.
    Train,
    /// Train every configured optimizer on every seed and test pairwise.
    Compare,
    /// DBS-Adam over the ema_beta × alpha grid.
    Sweep,
    /// Run only loading, splitting and resampling; print class counts.
    Resample,
    /// Re-render the CSV files and summary of an existing report.json.
    Report {
        /// Path to report.json, or the directory holding it.
        path: PathBuf,
    },
    /// List every config key.
    Keys,
}

impl Cli {
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path).map_err(|e| match e {
                HarnessError::Io { path, source } => {
                    HarnessError::Config(format!("{}: {source}", path.display()))
                }
                other => other,
            })?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(o) = &self.optimizer {
            cfg.set("optimizer", o)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(b) = self.beta {
            cfg.set("ema_beta", &b.to_string())?;
        }
        if let Some(a) = self.alpha {
            cfg.set("alpha", &a.to_string())?;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct ResampleInspection {
    seed: u64,
    class_names: Vec<String>,
    load: Option<LoadReport>,
    test: ClassDistribution,
    validation: ClassDistribution,
    train_before: ClassDistribution,
    train_after: ClassDistribution,
    resample: Option<ResampleSummary>,
}

fn inspect_resampling(cfg: &ExperimentConfig) -> Result<ResampleInspection> {
    let seed = cfg.training.seeds[0];
    let (raw, load) = load_dataset(cfg)?;
    let data = prepare(&raw, cfg, seed)?;
    let before = match &data.resample {
        Some(s) => s.before.clone(),
        None => data.train.class_counts(),
    };
    Ok(ResampleInspection {
        seed,
        class_names: data.class_names.clone(),
        load,
        test: class_distribution(&data.test),
        validation: class_distribution(&data.validation),
        train_before: distribution_from_counts(before),
        train_after: class_distribution(&data.train),
        resample: data.resample,
    })
}

fn finish(cli: &Cli, report: &ComparisonReport, dir: &std::path::Path) -> Result<()> {
    let written = emit_report(report, dir)?;
    if !cli.quiet {
        print!("{}", render_text(report));
        for p in written {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<22} {doc}");
            }
            Ok(())
        }
        Command::Report { path } => {
            let file = if path.is_dir() { path.join(REPORT_FILE) } else { path.clone() };
            let report = read_report(&file)?;
            let dir = match &cli.output {
                Some(o) => o.clone(),
                None => file.parent().map(PathBuf::from).unwrap_or_default(),
            };
            finish(cli, &report, &dir)
        }
        Command::Resample => {
            let cfg = cli.experiment_config()?;
            let inspection = inspect_resampling(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&inspection)?);
            Ok(())
        }
        Command::Train | Command::Compare | Command::Sweep => {
            let cfg = cli.experiment_config()?;
            let report = match cli.command {
                Command::Train => train_seeds(&cfg)?,
                Command::Compare => compare_optimizers(&cfg)?,
                _ => sensitivity_sweep(&cfg)?,
            };
            finish(cli, &report, &cfg.output_dir)
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
