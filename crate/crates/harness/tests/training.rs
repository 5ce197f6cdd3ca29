mod common;

use common::tiny_config;
use dbs_core::optimizers::OptimizerKind;
use dbs_harness::data::{generate_synthetic, load_dataset, prepare, to_sequences};
use dbs_harness::training::{evaluate, resolve_loss};
use dbs_harness::{train, train_model, train_run};

#[test]
fn same_seed_gives_identical_results() {
    let cfg = tiny_config();
    let a = train(&cfg, 11).unwrap();
    let b = train(&cfg, 11).unwrap();
    assert!(a.same_outcome(&b));
    let c = train(&cfg, 12).unwrap();
    assert!(!a.same_outcome(&c));
}

#[test]
fn patience_zero_stops_at_first_non_improvement() {
    let mut cfg = tiny_config();
    cfg.training.patience = 0;
    cfg.training.max_epochs = 30;
    for seed in [1, 2, 3, 4] {
        let r = train(&cfg, seed).unwrap();
        let losses: Vec<f64> = r.curve.iter().map(|e| e.validation_loss).collect();
        let n = losses.len();
        // Strictly improving up to the last epoch, which either failed to
        // improve or hit the cap.
        assert!(losses[..n - 1].windows(2).all(|w| w[1] < w[0]));
        if n < 30 {
            assert!(losses[n - 1] >= losses[n - 2]);
            assert_eq!(r.best_epoch, n - 1);
        }
    }
}

#[test]
fn early_stop_waits_exactly_patience_epochs() {
    let mut cfg = tiny_config();
    cfg.training.max_epochs = 30;
    cfg.training.patience = 3;
    for seed in [5, 6] {
        let r = train(&cfg, seed).unwrap();
        assert!(r.best_epoch <= r.epochs_run);
        if r.epochs_run < 30 {
            assert_eq!(r.epochs_run - r.best_epoch, 3);
        }
        let min = r.curve.iter().map(|e| e.validation_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_validation_loss, min);
        assert_eq!(r.curve[r.best_epoch - 1].validation_loss, min);
    }
}

#[test]
fn restored_weights_reproduce_best_validation_loss() {
    let cfg = tiny_config();
    let (raw, _) = load_dataset(&cfg).unwrap();
    let data = prepare(&raw, &cfg, 3).unwrap();
    let (r, net) = train_model(&cfg, &data, OptimizerKind::Adam, 3).unwrap();
    let loss = resolve_loss(&cfg.loss, &data.train.class_counts()).unwrap();
    let xs = to_sequences(&data.validation, data.sequence_length).unwrap();
    let (_, losses) = evaluate(&net, &loss, &xs, &data.validation.labels).unwrap();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    assert_eq!(mean, r.best_validation_loss);
}

#[test]
fn pinned_dbs_adam_matches_adam_at_scaled_rate() {
    let base = tiny_config();
    let (raw, _) = load_dataset(&base).unwrap();
    let data = prepare(&raw, &base, 2).unwrap();
    for c in [0.1, 0.5, 1.0] {
        let mut dbs = base.clone();
        dbs.difficulty.pinned = Some(c);
        let mut adam = base.clone();
        adam.optimizer_config.base_lr = base.optimizer_config.base_lr * c;
        let a = train_run(&dbs, &data, OptimizerKind::DbsAdam, 2).unwrap();
        let b = train_run(&adam, &data, OptimizerKind::Adam, 2).unwrap();
        assert_eq!(a.curve, b.curve, "c = {c}");
        assert_eq!(a.test_metrics, b.test_metrics);
        assert!(a.lr_trace.iter().all(|&lr| lr == base.optimizer_config.base_lr * c));
    }
}

#[test]
fn dbs_learning_rates_stay_in_bounds() {
    let cfg = tiny_config();
    let r = train(&cfg, 9).unwrap();
    let lr = cfg.optimizer_config.base_lr;
    assert!(!r.lr_trace.is_empty());
    assert!(r.lr_trace.iter().all(|&x| x >= lr * cfg.difficulty.d_min && x <= lr * cfg.difficulty.d_max));
    let s = r.lr_summary.unwrap();
    assert!(s.min <= s.mean && s.mean <= s.max);
    // Warm-up emits the neutral difficulty.
    assert!(r.lr_trace[..10].iter().all(|&x| x == lr * 0.5));
}

#[test]
fn baseline_runs_have_no_lr_trace() {
    let mut cfg = tiny_config();
    cfg.optimizer = OptimizerKind::Amsgrad;
    let r = train(&cfg, 1).unwrap();
    assert!(r.lr_trace.is_empty());
    assert!(r.lr_summary.is_none());
}

#[test]
fn test_rows_are_never_resampled() {
    let cfg = tiny_config();
    let raw = generate_synthetic(&dbs_harness::config::SyntheticSpec {
        samples: 240,
        features: 6,
        priors: vec![0.6, 0.3, 0.1],
        separation: 4.0,
        seed: 7,
    });
    for seed in [1, 2] {
        let data = prepare(&raw, &cfg, seed).unwrap();
        let all = data.encoder.transform(&raw, &(0..raw.len()).collect::<Vec<_>>()).unwrap().0;
        for (i, &row) in data.test_rows.iter().enumerate() {
            assert_eq!(data.test.features.row(i), all.row(row));
            assert_eq!(data.test.labels[i], raw.labels[row]);
        }
        // No synthetic training point coincides with a test point.
        for i in 0..data.test.len() {
            let t = data.test.features.row(i);
            assert!((0..data.train.len()).all(|j| data.train.features.row(j) != t));
        }
    }
}

#[test]
fn split_depends_on_seed_only() {
    let mut a = tiny_config();
    let mut b = tiny_config();
    a.optimizer = OptimizerKind::Adam;
    b.optimizer = OptimizerKind::Adabound;
    b.optimizer_config.base_lr = 0.01;
    let (raw, _) = load_dataset(&a).unwrap();
    let pa = prepare(&raw, &a, 4).unwrap();
    let pb = prepare(&raw, &b, 4).unwrap();
    assert_eq!(pa.test_rows, pb.test_rows);
    assert_eq!(pa.train.features.as_slice(), pb.train.features.as_slice());
}

#[test]
fn config_errors_surface_before_training() {
    let mut cfg = tiny_config();
    cfg.training.batch_size = 0;
    let err = train(&cfg, 1).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
