//! One training run: minibatch loop, early stopping on validation loss,
//! best-weight restore, test evaluation.

use std::time::Instant;

use dbs_core::evaluation::{confusion_matrix, metrics_from_confusion, ConfusionMatrix, MetricsReport};
use dbs_core::losses::{default_class_weights, forward_losses, loss_gradient, Alpha, LossConfig};
use dbs_core::models::{Mode, SequenceNetwork};
use dbs_core::optimizers::{Optimizer, OptimizerKind};
use dbs_core::resampling::ResampleSummary;
use dbs_core::{Matrix, SeededRng};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LossSpec};
use crate::data::{load_dataset, prepare, streams, to_sequences, PreparedData};
use crate::error::{HarnessError, Result};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    #[serde(with = "dbs_core::numerics::serde_float")]
    pub train_loss: f64,
    #[serde(with = "dbs_core::numerics::serde_float")]
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub steps: usize,
}

impl LrSummary {
    pub fn from_trace(trace: &[f64]) -> Option<Self> {
        if trace.is_empty() {
            return None;
        }
        Some(Self {
            min: trace.iter().copied().fold(f64::INFINITY, f64::min),
            mean: trace.iter().sum::<f64>() / trace.len() as f64,
            max: trace.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            steps: trace.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Set for sensitivity-sweep runs.
    pub ema_beta: Option<f64>,
    pub alpha: Option<f64>,
    pub epochs_run: usize,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    #[serde(with = "dbs_core::numerics::serde_float")]
    pub best_validation_loss: f64,
    pub curve: Vec<EpochRecord>,
    pub test_metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
    /// Learning-rate statistics; only DBS-Adam varies it per batch.
    pub lr_summary: Option<LrSummary>,
    /// Per-batch learning rate of DBS-Adam runs.
    pub lr_trace: Vec<f64>,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
    pub resample: Option<ResampleSummary>,
    pub wall_clock_seconds: f64,
}

impl RunResult {
    /// Equality of everything except timing.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        let mut a = self.clone();
        a.wall_clock_seconds = other.wall_clock_seconds;
        &a == other
    }
}

/// Resolves the loss, deriving `auto` class weights from `train_counts`.
pub fn resolve_loss(spec: &LossSpec, train_counts: &[usize]) -> Result<LossConfig> {
    let loss = match spec {
        LossSpec::CrossEntropy => LossConfig::CrossEntropy,
        LossSpec::WeightedCrossEntropy { class_weights } => LossConfig::WeightedCrossEntropy {
            class_weights: match class_weights {
                Some(w) => w.clone(),
                None => default_class_weights(train_counts)?,
            },
        },
        LossSpec::Focal { gamma, alpha } => LossConfig::Focal {
            gamma: *gamma,
            alpha: alpha.clone(),
        },
    };
    if let LossConfig::Focal {
        alpha: Alpha::PerClass(v),
        ..
    } = &loss
    {
        if v.len() != train_counts.len() {
            return Err(HarnessError::Config(format!(
                "focal_alpha has {} entries for {} classes",
                v.len(),
                train_counts.len()
            )));
        }
    }
    loss.validate(train_counts.len())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(loss)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode predictions and per-sample losses.
pub fn evaluate(net: &SequenceNetwork, loss: &LossConfig, xs: &[Matrix], labels: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(xs.len());
    let mut losses = Vec::with_capacity(xs.len());
    for (chunk, lab) in xs.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let logits = net.predict_logits(chunk)?;
        let (_, per_sample) = forward_losses(loss, &logits, lab)?;
        preds.extend((0..logits.rows()).map(|r| argmax(logits.row(r))));
        losses.extend(per_sample);
    }
    Ok((preds, losses))
}

fn mean_or_nan(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains `kind` on prepared data. The split, resampling, initialization,
/// batch order and dropout masks depend only on `seed`, so two optimizers
/// with the same seed see identical data and start from identical weights.
pub fn train_run(config: &ExperimentConfig, data: &PreparedData, kind: OptimizerKind, seed: u64) -> Result<RunResult> {
    Ok(train_model(config, data, kind, seed)?.0)
}

/// [`train_run`], also returning the network with the restored best weights.
pub fn train_model(
    config: &ExperimentConfig,
    data: &PreparedData,
    kind: OptimizerKind,
    seed: u64,
) -> Result<(RunResult, SequenceNetwork)> {
    let started = Instant::now();
    let classes = data.class_names.len();
    let loss = resolve_loss(&config.loss, &data.train.class_counts())?;
    let s = data.sequence_length;
    let train_x = to_sequences(&data.train, s)?;
    let val_x = to_sequences(&data.validation, s)?;
    let test_x = to_sequences(&data.test, s)?;
    if train_x.is_empty() {
        return Err(HarnessError::Data("no training rows after preprocessing".into()));
    }
    let width = train_x[0].cols();

    let root = SeededRng::new(seed);
    let mut net = SequenceNetwork::new(config.model.shape(width, classes), &mut root.fork(streams::INIT))?;
    let mut optimizer = Optimizer::new(kind, config.optimizer_config.clone(), config.difficulty.clone())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut shuffle_rng = root.fork(streams::SHUFFLE);
    let mut dropout_rng = root.fork(streams::DROPOUT);

    let batch_size = config.training.batch_size;
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut lr_trace = Vec::new();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, dbs_core::models::NetworkParams)> = None;
    let mut wait = 0;

    for epoch in 1..=config.training.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut batch_losses = Vec::with_capacity(order.len().div_ceil(batch_size));
        for (b, idx) in order.chunks(batch_size).enumerate() {
            let ctx = |source| HarnessError::Run {
                optimizer: kind.to_string(),
                seed,
                epoch,
                batch: b,
                source,
            };
            let xs: Vec<Matrix> = idx.iter().map(|&i| train_x[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let (logits, cache) = net.forward(&xs, Mode::Train(&mut dropout_rng)).map_err(ctx)?;
            let (_, per_sample) = forward_losses(&loss, &logits, &labels).map_err(ctx)?;
            let batch_loss = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
            let d_logits = loss_gradient(&loss, &logits, &labels).map_err(ctx)?;
            let grads = net.backward(&cache, &d_logits).map_err(ctx)?;
            let grad_tensors = grads.tensors();
            let lr = optimizer
                .step(&mut net.tensors_mut(), &grad_tensors, batch_loss)
                .map_err(ctx)?;
            if kind == OptimizerKind::DbsAdam {
                lr_trace.push(lr);
            }
            batch_losses.push(batch_loss);
        }
        let train_loss = mean_or_nan(&batch_losses);
        // Without a validation split the training loss drives early stopping.
        let validation_loss = if val_x.is_empty() {
            train_loss
        } else {
            mean_or_nan(&evaluate(&net, &loss, &val_x, &data.validation.labels)?.1)
        };
        curve.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| validation_loss < *b);
        if improved {
            best = Some((validation_loss, epoch, net.params().clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.training.patience {
                break;
            }
        }
    }

    let (best_validation_loss, best_epoch, best_params) = best.expect("at least one epoch ran");
    *net.params_mut() = best_params;

    let (preds, losses) = evaluate(&net, &loss, &test_x, &data.test.labels)?;
    let confusion = confusion_matrix(&data.test.labels, &preds, classes)?;
    let test_metrics = metrics_from_confusion(&confusion, &losses)?;
    let result = RunResult {
        optimizer: kind,
        seed,
        ema_beta: None,
        alpha: None,
        epochs_run: curve.len(),
        best_epoch,
        best_validation_loss,
        curve,
        test_metrics,
        confusion,
        lr_summary: LrSummary::from_trace(&lr_trace),
        lr_trace,
        train_class_counts: data.train.class_counts(),
        test_class_counts: data.test.class_counts(),
        resample: data.resample.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((result, net))
}

/// Loads and prepares the configured dataset, then trains `config.optimizer`.
pub fn train(config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    config.validate()?;
    let (raw, _) = load_dataset(config)?;
    let data = prepare(&raw, config, seed)?;
    train_run(config, &data, config.optimizer, seed)
}
