//! Softmax head and the classification losses, each with its analytic
//! gradient with respect to the logits.
//!
//! Losses are reduced by the batch mean. Every logarithm sees its argument
//! floored at [`PROB_FLOOR`]; the gradients are the exact derivatives of the
//! floored expressions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const PROB_FLOOR: f64 = 1e-12;

/// Focal-loss class balance: one scalar for every class or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Uniform(f64),
    PerClass(Vec<f64>),
}

impl Alpha {
    fn for_class(&self, c: usize) -> f64 {
        match self {
            Alpha::Uniform(a) => *a,
            Alpha::PerClass(v) => v[c],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossConfig {
    CrossEntropy,
    WeightedCrossEntropy { class_weights: Vec<f64> },
    Focal { gamma: f64, alpha: Alpha },
}

impl LossConfig {
    /// Focal loss with γ = 2, α = 0.25.
    pub fn focal_default() -> Self {
        LossConfig::Focal {
            gamma: 2.0,
            alpha: Alpha::Uniform(0.25),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self {
            LossConfig::CrossEntropy => Ok(()),
            LossConfig::WeightedCrossEntropy { class_weights } => {
                check_len("class_weights", class_weights.len(), classes)?;
                if class_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "class weights must be strictly positive".into(),
                    ));
                }
                Ok(())
            }
            LossConfig::Focal { gamma, alpha } => {
                if !(*gamma >= 0.0) {
                    return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
                }
                let ok = |a: f64| (0.0..=1.0).contains(&a);
                match alpha {
                    Alpha::Uniform(a) if !ok(*a) => Err(Error::InvalidArgument(format!(
                        "alpha must lie in [0, 1], got {a}"
                    ))),
                    Alpha::PerClass(v) => {
                        check_len("alpha", v.len(), classes)?;
                        if v.iter().all(|&a| ok(a)) {
                            Ok(())
                        } else {
                            Err(Error::InvalidArgument("alpha entries must lie in [0, 1]".into()))
                        }
                    }
                    _ => Ok(()),
                }
            }
        }
    }
}

fn check_len(what: &str, got: usize, classes: usize) -> Result<()> {
    if got != classes {
        return Err(Error::InvalidArgument(format!(
            "{what} has {got} entries but there are {classes} classes"
        )));
    }
    Ok(())
}

fn check_batch(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            op: "loss",
            left: probs.shape(),
            right: (labels.len(), 1),
        });
    }
    if probs.rows() == 0 {
        return Err(Error::Empty("loss batch"));
    }
    for &y in labels {
        if y >= probs.cols() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: probs.cols(),
            });
        }
    }
    Ok(())
}

#[inline]
fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Max-shifted softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
    }
    out
}

/// `L = (1/M) Σ ℓ_j`.
pub fn batch_mean_loss(per_sample: &[f64]) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::Empty("batch_mean_loss"));
    }
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// `w_c = N / (N_c · C)` with `N = Σ N_c`.
pub fn default_class_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::ClassTooSmall {
            class: c,
            count: 0,
            needed: 1,
        });
    }
    let total: usize = class_counts.iter().sum();
    let classes = class_counts.len() as f64;
    Ok(class_counts
        .iter()
        .map(|&n| total as f64 / (n as f64 * classes))
        .collect())
}

pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    per_sample_losses(&LossConfig::CrossEntropy, probs, labels).and_then(|l| batch_mean_loss(&l))
}

pub fn weighted_cross_entropy(probs: &Matrix, labels: &[usize], weights: &[f64]) -> Result<f64> {
    let config = LossConfig::WeightedCrossEntropy {
        class_weights: weights.to_vec(),
    };
    per_sample_losses(&config, probs, labels).and_then(|l| batch_mean_loss(&l))
}

pub fn focal_loss(probs: &Matrix, labels: &[usize], gamma: f64, alpha: &Alpha) -> Result<f64> {
    let config = LossConfig::Focal {
        gamma,
        alpha: alpha.clone(),
    };
    per_sample_losses(&config, probs, labels).and_then(|l| batch_mean_loss(&l))
}

/// Per-sample losses given class probabilities.
pub fn per_sample_losses(config: &LossConfig, probs: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_batch(probs, labels)?;
    config.validate(probs.cols())?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = probs.get(i, y);
            match config {
                LossConfig::CrossEntropy => -floored_ln(p),
                LossConfig::WeightedCrossEntropy { class_weights } => {
                    -class_weights[y] * floored_ln(p)
                }
                LossConfig::Focal { gamma, alpha } => {
                    let q = (1.0 - p).max(0.0);
                    -alpha.for_class(y) * q.powf(*gamma) * floored_ln(p)
                }
            }
        })
        .collect())
}

/// Softmax of `logits` and the per-sample losses.
pub fn forward_losses(config: &LossConfig, logits: &Matrix, labels: &[usize]) -> Result<(Matrix, Vec<f64>)> {
    let probs = softmax_rows(logits);
    let losses = per_sample_losses(config, &probs, labels)?;
    Ok((probs, losses))
}

/// Batch-mean loss computed from logits.
pub fn loss_value(config: &LossConfig, logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let (_, losses) = forward_losses(config, logits, labels)?;
    batch_mean_loss(&losses)
}

/// `∂L/∂logits` of the batch-mean loss.
pub fn loss_gradient(config: &LossConfig, logits: &Matrix, labels: &[usize]) -> Result<Matrix> {
    let probs = softmax_rows(logits);
    check_batch(&probs, labels)?;
    config.validate(probs.cols())?;
    let n = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.get(i, y);
        let live = if p >= PROB_FLOOR { 1.0 } else { 0.0 };
        // Every loss here is a function of p = softmax_y, so
        // ∂ℓ/∂z_k = coef · (δ_yk − p_k) with coef = p · ∂ℓ/∂p.
        let coef = match config {
            LossConfig::CrossEntropy => -live,
            LossConfig::WeightedCrossEntropy { class_weights } => -class_weights[y] * live,
            LossConfig::Focal { gamma, alpha } => {
                let q = (1.0 - p).max(0.0);
                let focus = if *gamma == 0.0 || q == 0.0 {
                    0.0
                } else {
                    gamma * q.powf(gamma - 1.0) * p * floored_ln(p)
                };
                alpha.for_class(y) * (focus - q.powf(*gamma) * live)
            }
        };
        let row = grad.row_mut(i);
        for (k, g) in row.iter_mut().enumerate() {
            let delta = if k == y { 1.0 } else { 0.0 };
            *g = coef * (delta - probs.get(i, k)) / n;
        }
    }
    Ok(grad)
}
