//! End-to-end use of the core crate: resampling at realistic scale and a
//! short training loop over the public APIs.

use dbs_core::evaluation::{confusion_matrix, metrics_from_confusion, stratified_split};
use dbs_core::losses::{forward_losses, loss_gradient, LossConfig};
use dbs_core::models::{chunk_features, Aggregation, Mode, NetworkShape, SequenceNetwork};
use dbs_core::optimizers::{DifficultyConfig, Optimizer, OptimizerConfig, OptimizerKind};
use dbs_core::resampling::{class_distribution, smote_enn, LabeledDataset};
use dbs_core::{Matrix, SeededRng};

/// Gaussian blobs with class `c` centred at `sep · e_c`.
fn blobs(counts: &[usize], dims: usize, sep: f64, seed: u64) -> LabeledDataset {
    let mut rng = SeededRng::new(seed);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for d in 0..dims {
                let centre = if d == c { sep } else { 0.0 };
                values.push(centre + rng.normal());
            }
            labels.push(c);
        }
    }
    let names = (0..counts.len()).map(|c| format!("c{c}")).collect();
    LabeledDataset::new(Matrix::from_vec(labels.len(), dims, values).unwrap(), labels, names).unwrap()
}

#[test]
fn smote_enn_at_paper_scale_balances_three_classes() {
    // Three-class source counts of the accident data after removing Unknown.
    let data = blobs(&[6294, 677, 24], 6, 3.0, 17);
    let mut rng = SeededRng::new(42);
    let (out, summary) = smote_enn(&data, 5, 3, &mut rng).unwrap();
    let dist = class_distribution(&out);
    assert_eq!(out.num_classes(), 3);
    assert!(dist.counts.iter().all(|&c| c > 0));
    let majority = dist.percentages.iter().copied().fold(0.0, f64::max);
    assert!(majority <= 45.0, "{dist:?}");
    assert_eq!(summary.before, vec![6294, 677, 24]);
    assert_eq!(summary.synthesized, vec![0, 5617, 6270]);
    for c in 0..3 {
        assert_eq!(summary.after[c], summary.before[c] + summary.synthesized[c] - summary.removed[c]);
    }
}

#[test]
fn short_training_loop_fits_a_separable_task() {
    let data = blobs(&[120, 60, 20], 6, 4.0, 3);
    let (train, test) = stratified_split(&data, 0.25, &mut SeededRng::new(1)).unwrap();
    let seqs = |d: &LabeledDataset| -> Vec<Matrix> {
        (0..d.len()).map(|i| chunk_features(d.features.row(i), 2).unwrap()).collect()
    };
    let (xs, xt) = (seqs(&train), seqs(&test));
    let shape = NetworkShape {
        input_width: 3,
        hidden1: 6,
        hidden2: 4,
        dense_units: 8,
        classes: 3,
        dropout_rate: 0.1,
        aggregation: Aggregation::Last,
    };
    let mut rng = SeededRng::new(5);
    let mut net = SequenceNetwork::new(shape, &mut rng).unwrap();
    let config = OptimizerConfig {
        base_lr: 0.01,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(OptimizerKind::DbsAdam, config, DifficultyConfig::default()).unwrap();
    let loss = LossConfig::focal_default();

    let mean_loss = |net: &SequenceNetwork| {
        let logits = net.predict_logits(&xs).unwrap();
        let (_, l) = forward_losses(&loss, &logits, &train.labels).unwrap();
        l.iter().sum::<f64>() / l.len() as f64
    };
    let initial = mean_loss(&net);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..40 {
        rng.shuffle(&mut order);
        for idx in order.chunks(16) {
            let bx: Vec<Matrix> = idx.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (logits, cache) = net.forward(&bx, Mode::Train(&mut rng)).unwrap();
            let (_, l) = forward_losses(&loss, &logits, &by).unwrap();
            let batch_loss = l.iter().sum::<f64>() / l.len() as f64;
            let grads = net.backward(&cache, &loss_gradient(&loss, &logits, &by).unwrap()).unwrap();
            let lr = opt.step(&mut net.tensors_mut(), &grads.tensors(), batch_loss).unwrap();
            assert!((0.001..=0.01).contains(&lr));
        }
    }
    assert!(mean_loss(&net) < initial / 4.0);

    let logits = net.predict_logits(&xt).unwrap();
    let preds: Vec<usize> = (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (0..3).fold(0, |b, c| if row[c] > row[b] { c } else { b })
        })
        .collect();
    let metrics = metrics_from_confusion(&confusion_matrix(&test.labels, &preds, 3).unwrap(), &[]).unwrap();
    assert!(metrics.accuracy >= 0.9, "{metrics:?}");
}
