mod common;

use common::tiny_config;
use dbs_core::evaluation::aggregate_runs;
use dbs_core::optimizers::OptimizerKind;
use dbs_harness::data::{load_dataset, prepare};
use dbs_harness::{compare_optimizers, sensitivity_sweep, train_run};

#[test]
fn compare_covers_every_pair_and_metric() {
    let mut cfg = tiny_config();
    cfg.optimizers = vec![OptimizerKind::Adam, OptimizerKind::Amsgrad, OptimizerKind::DbsAdam];
    let report = compare_optimizers(&cfg).unwrap();
    assert_eq!(report.runs.len(), 9);
    assert_eq!(report.aggregates.len(), 3);
    let metrics = report.runs[0].test_metrics.scalars().len();
    assert_eq!(report.significance.len(), 3 * metrics);
    for (i, a) in cfg.optimizers.iter().enumerate() {
        for b in &cfg.optimizers[i + 1..] {
            let n = report.significance.iter().filter(|s| s.a == *a && s.b == *b).count();
            assert_eq!(n, metrics);
        }
    }
    // Runs for one seed share the prepared data.
    for seed in &cfg.training.seeds {
        let counts: Vec<_> = report
            .runs
            .iter()
            .filter(|r| r.seed == *seed)
            .map(|r| (r.train_class_counts.clone(), r.test_class_counts.clone()))
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn equivalent_optimizers_show_no_difference() {
    // DBS-Adam pinned at 1.0 takes exactly Adam's steps.
    let mut cfg = tiny_config();
    cfg.optimizers = vec![OptimizerKind::Adam, OptimizerKind::DbsAdam];
    cfg.difficulty.pinned = Some(1.0);
    let report = compare_optimizers(&cfg).unwrap();
    assert!(!report.significance.is_empty());
    for s in &report.significance {
        assert_eq!(s.result.mean_difference, 0.0, "{}", s.metric);
        assert_eq!(s.result.t_statistic, 0.0);
        assert_eq!(s.result.p_value, 1.0);
        assert_eq!(s.result.cohens_d, 0.0);
        assert!(!s.result.significant);
    }
    assert_eq!(report.aggregates[0].metrics, report.aggregates[1].metrics);
}

#[test]
fn compare_preconditions() {
    let mut cfg = tiny_config();
    cfg.optimizers = vec![OptimizerKind::Adam];
    assert_eq!(compare_optimizers(&cfg).unwrap_err().exit_code(), 1);
    let mut cfg = tiny_config();
    cfg.training.seeds = vec![1];
    assert_eq!(compare_optimizers(&cfg).unwrap_err().exit_code(), 1);
    let mut cfg = tiny_config();
    cfg.optimizers = vec![OptimizerKind::Adam, OptimizerKind::Adam];
    assert_eq!(compare_optimizers(&cfg).unwrap_err().exit_code(), 1);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut cfg = tiny_config();
    cfg.optimizers = vec![OptimizerKind::Adamw, OptimizerKind::DbsAdam];
    cfg.threads = 1;
    let a = compare_optimizers(&cfg).unwrap();
    cfg.threads = 4;
    let b = compare_optimizers(&cfg).unwrap();
    assert_eq!(a.runs.len(), b.runs.len());
    assert!(a.runs.iter().zip(&b.runs).all(|(x, y)| x.same_outcome(y)));
    assert_eq!(a.significance, b.significance);
}

#[test]
fn default_grid_has_twelve_cells() {
    let mut cfg = tiny_config();
    cfg.training.max_epochs = 2;
    cfg.training.patience = 1;
    let report = sensitivity_sweep(&cfg).unwrap();
    let sweep = report.sweep.unwrap();
    assert_eq!(sweep.cells.len(), 12);
    assert_eq!(sweep.runs.len(), 24);
    let grid: Vec<(f64, f64)> = sweep.cells.iter().map(|c| (c.ema_beta, c.alpha)).collect();
    assert_eq!(grid[0], (0.8, 0.3));
    assert_eq!(grid[11], (0.99, 0.7));
    for c in &sweep.cells {
        assert_eq!(c.seeds, vec![1, 2]);
        for k in ["accuracy", "precision", "recall"] {
            assert!(c.metrics.contains_key(k));
        }
    }
    assert_eq!(sweep.beta_marginals.len(), 4);
    assert_eq!(sweep.alpha_marginals.len(), 3);
    assert!(sweep.accuracy_spread >= 0.0);
    assert_eq!(sweep.accuracy_spread, sweep.max_accuracy - sweep.min_accuracy);
    assert!(report.runs.is_empty());
}

#[test]
fn single_cell_sweep_matches_direct_runs() {
    let mut cfg = tiny_config();
    cfg.sweep.beta_grid = vec![0.9];
    cfg.sweep.alpha_grid = vec![0.7];
    let sweep = sensitivity_sweep(&cfg).unwrap().sweep.unwrap();
    assert_eq!(sweep.cells.len(), 1);

    let mut direct = cfg.clone();
    direct.difficulty.ema_beta = 0.9;
    direct.difficulty.alpha_mix = 0.7;
    let (raw, _) = load_dataset(&direct).unwrap();
    let runs: Vec<_> = cfg
        .sweep_seeds()
        .into_iter()
        .map(|s| train_run(&direct, &prepare(&raw, &direct, s).unwrap(), OptimizerKind::DbsAdam, s).unwrap())
        .collect();
    let reports: Vec<_> = runs.iter().map(|r| r.test_metrics.clone()).collect();
    assert_eq!(sweep.cells[0].metrics, aggregate_runs(&reports).unwrap());
    for (swept, direct) in sweep.runs.iter().zip(&runs) {
        assert_eq!(swept.ema_beta, Some(0.9));
        assert_eq!(swept.alpha, Some(0.7));
        assert_eq!(swept.curve, direct.curve);
    }
}
