//! Multi-seed optimizer comparison and the β/α sensitivity grid.
//!
//! Data for a seed is prepared once and shared by every run with that seed,
//! so all optimizers see the same split, resampled training set and initial
//! weights. Runs execute in parallel; results are collected in job order.

use std::collections::BTreeMap;

use dbs_core::evaluation::{aggregate_runs, compare_paired, SignificanceResult, Summary};
use dbs_core::optimizers::OptimizerKind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{load_dataset, prepare, LoadReport, PreparedData};
use crate::error::{HarnessError, Result};
use crate::training::{train_run, LrSummary, RunResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerAggregate {
    pub optimizer: OptimizerKind,
    pub runs: usize,
    /// Mean and sample std of each test metric across seeds.
    pub metrics: BTreeMap<String, Summary>,
    pub mean_epochs_to_best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSignificance {
    pub a: OptimizerKind,
    pub b: OptimizerKind,
    pub metric: String,
    /// Paired by seed; differences are `a − b`.
    pub result: SignificanceResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub ema_beta: f64,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Summary>,
    pub lr_summary: Option<LrSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub value: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub optimizer: OptimizerKind,
    pub cells: Vec<SweepCell>,
    pub runs: Vec<RunResult>,
    /// Max minus min of the per-cell mean accuracy.
    pub accuracy_spread: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub beta_marginals: Vec<Marginal>,
    pub alpha_marginals: Vec<Marginal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    pub config: ExperimentConfig,
    pub load: Option<LoadReport>,
    pub runs: Vec<RunResult>,
    pub aggregates: Vec<OptimizerAggregate>,
    pub significance: Vec<PairwiseSignificance>,
    pub sweep: Option<SweepReport>,
}

impl ComparisonReport {
    pub fn empty(config: &ExperimentConfig) -> Self {
        Self {
            name: config.name.clone(),
            config: config.clone(),
            load: None,
            runs: Vec::new(),
            aggregates: Vec::new(),
            significance: Vec::new(),
            sweep: None,
        }
    }

    /// Compare runs followed by sweep runs.
    pub fn all_runs(&self) -> impl Iterator<Item = (&'static str, &RunResult)> {
        let sweep = self.sweep.iter().flat_map(|s| s.runs.iter());
        self.runs.iter().map(|r| ("compare", r)).chain(sweep.map(|r| ("sweep", r)))
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

fn prepare_seeds(config: &ExperimentConfig, seeds: &[u64]) -> Result<(Vec<PreparedData>, Option<LoadReport>)> {
    let (raw, load) = load_dataset(config)?;
    let prepared = seeds
        .par_iter()
        .map(|&seed| prepare(&raw, config, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok((prepared, load))
}

fn aggregate(kind: OptimizerKind, runs: &[&RunResult]) -> Result<OptimizerAggregate> {
    let reports: Vec<_> = runs.iter().map(|r| r.test_metrics.clone()).collect();
    Ok(OptimizerAggregate {
        optimizer: kind,
        runs: runs.len(),
        metrics: aggregate_runs(&reports)?,
        mean_epochs_to_best: runs.iter().map(|r| r.best_epoch as f64).sum::<f64>() / runs.len() as f64,
    })
}

fn metric(run: &RunResult, name: &str) -> Option<f64> {
    run.test_metrics.scalars().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
}

/// One significance entry per optimizer pair and metric. `runs_by_kind`
/// lists each optimizer's runs in the same seed order.
fn pairwise(runs_by_kind: &[(OptimizerKind, Vec<&RunResult>)]) -> Result<Vec<PairwiseSignificance>> {
    let mut out = Vec::new();
    for (i, (a, ra)) in runs_by_kind.iter().enumerate() {
        for (b, rb) in &runs_by_kind[i + 1..] {
            let names: Vec<&str> = ra[0].test_metrics.scalars().iter().map(|(n, _)| *n).collect();
            for name in names {
                let xa: Option<Vec<f64>> = ra.iter().map(|r| metric(r, name)).collect();
                let xb: Option<Vec<f64>> = rb.iter().map(|r| metric(r, name)).collect();
                let (Some(xa), Some(xb)) = (xa, xb) else { continue };
                out.push(PairwiseSignificance {
                    a: *a,
                    b: *b,
                    metric: name.to_string(),
                    result: compare_paired(&xa, &xb)?,
                });
            }
        }
    }
    Ok(out)
}

/// Trains every configured optimizer on every seed.
pub fn compare_optimizers(config: &ExperimentConfig) -> Result<ComparisonReport> {
    config.validate()?;
    let kinds = &config.optimizers;
    let seeds = &config.training.seeds;
    if kinds.len() < 2 {
        return Err(HarnessError::Config(format!("compare needs >= 2 optimizers, got {}", kinds.len())));
    }
    if seeds.len() < 2 {
        return Err(HarnessError::Config(format!("compare needs >= 2 seeds, got {}", seeds.len())));
    }
    let mut distinct = kinds.clone();
    distinct.sort_by_key(|k| k.name());
    distinct.dedup();
    if distinct.len() != kinds.len() {
        return Err(HarnessError::Config(format!("optimizers must be distinct: {kinds:?}")));
    }

    pool(config.threads)?.install(|| {
        let (prepared, load) = prepare_seeds(config, seeds)?;
        let jobs: Vec<(usize, OptimizerKind)> = kinds
            .iter()
            .flat_map(|&k| (0..seeds.len()).map(move |s| (s, k)))
            .collect();
        let runs = jobs
            .par_iter()
            .map(|&(s, k)| train_run(config, &prepared[s], k, seeds[s]))
            .collect::<Result<Vec<_>>>()?;

        let by_kind: Vec<(OptimizerKind, Vec<&RunResult>)> = kinds
            .iter()
            .map(|&k| (k, runs.iter().filter(|r| r.optimizer == k).collect()))
            .collect();
        let aggregates = by_kind
            .iter()
            .map(|(k, rs)| aggregate(*k, rs))
            .collect::<Result<Vec<_>>>()?;
        let significance = pairwise(&by_kind)?;
        Ok(ComparisonReport {
            name: config.name.clone(),
            config: config.clone(),
            load,
            runs,
            aggregates,
            significance,
            sweep: None,
        })
    })
}

/// Trains `config.optimizer` on each seed; no pairwise statistics.
pub fn train_seeds(config: &ExperimentConfig) -> Result<ComparisonReport> {
    config.validate()?;
    let seeds = &config.training.seeds;
    let kind = config.optimizer;
    pool(config.threads)?.install(|| {
        let (prepared, load) = prepare_seeds(config, seeds)?;
        let runs = (0..seeds.len())
            .into_par_iter()
            .map(|s| train_run(config, &prepared[s], kind, seeds[s]))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&RunResult> = runs.iter().collect();
        let aggregates = vec![aggregate(kind, &refs)?];
        Ok(ComparisonReport {
            name: config.name.clone(),
            config: config.clone(),
            load,
            runs,
            aggregates,
            significance: Vec::new(),
            sweep: None,
        })
    })
}

fn marginals(cells: &[SweepCell], key: impl Fn(&SweepCell) -> f64) -> Vec<Marginal> {
    let mut values: Vec<f64> = Vec::new();
    for c in cells {
        if !values.contains(&key(c)) {
            values.push(key(c));
        }
    }
    values
        .into_iter()
        .map(|v| {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| key(c) == v)
                .map(|c| c.metrics["accuracy"].mean)
                .collect();
            Marginal {
                value: v,
                mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            }
        })
        .collect()
}

/// DBS-Adam over the `beta_grid × alpha_grid` of difficulty settings,
/// `sweep_seeds` runs per cell, cells in row-major (β outer) order.
pub fn sensitivity_sweep(config: &ExperimentConfig) -> Result<ComparisonReport> {
    config.validate()?;
    let seeds = config.sweep_seeds();
    let kind = OptimizerKind::DbsAdam;
    let grid: Vec<(f64, f64)> = config
        .sweep
        .beta_grid
        .iter()
        .flat_map(|&b| config.sweep.alpha_grid.iter().map(move |&a| (b, a)))
        .collect();
    let cell_configs: Vec<ExperimentConfig> = grid
        .iter()
        .map(|&(b, a)| {
            let mut c = config.clone();
            c.difficulty.ema_beta = b;
            c.difficulty.alpha_mix = a;
            c.difficulty.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(c)
        })
        .collect::<Result<_>>()?;

    pool(config.threads)?.install(|| {
        let (prepared, load) = prepare_seeds(config, &seeds)?;
        let jobs: Vec<(usize, usize)> = (0..grid.len())
            .flat_map(|c| (0..seeds.len()).map(move |s| (c, s)))
            .collect();
        let runs = jobs
            .par_iter()
            .map(|&(c, s)| {
                let mut r = train_run(&cell_configs[c], &prepared[s], kind, seeds[s])?;
                r.ema_beta = Some(grid[c].0);
                r.alpha = Some(grid[c].1);
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;

        let cells = grid
            .iter()
            .enumerate()
            .map(|(c, &(ema_beta, alpha))| {
                let rs = &runs[c * seeds.len()..(c + 1) * seeds.len()];
                let reports: Vec<_> = rs.iter().map(|r| r.test_metrics.clone()).collect();
                let trace: Vec<f64> = rs.iter().flat_map(|r| r.lr_trace.iter().copied()).collect();
                Ok(SweepCell {
                    ema_beta,
                    alpha,
                    seeds: seeds.clone(),
                    metrics: aggregate_runs(&reports)?,
                    lr_summary: LrSummary::from_trace(&trace),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let accs: Vec<f64> = cells.iter().map(|c| c.metrics["accuracy"].mean).collect();
        let min_accuracy = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let max_accuracy = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sweep = SweepReport {
            optimizer: kind,
            beta_marginals: marginals(&cells, |c| c.ema_beta),
            alpha_marginals: marginals(&cells, |c| c.alpha),
            cells,
            runs,
            accuracy_spread: max_accuracy - min_accuracy,
            min_accuracy,
            max_accuracy,
        };
        Ok(ComparisonReport {
            load,
            sweep: Some(sweep),
            ..ComparisonReport::empty(config)
        })
    })
}
