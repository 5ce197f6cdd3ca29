//! Classification metrics, stratified splitting, and paired significance
//! testing across seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::numerics::{mean, sample_std, SeededRng};
use crate::resampling::LabeledDataset;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// `counts[true][predicted]`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|c| self.counts[c][c]).sum()
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            op: "confusion_matrix",
            left: (truth.len(), 1),
            right: (predicted.len(), 1),
        });
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        for label in [t, p] {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub mean_loss: Option<f64>,
}

impl MetricsReport {
    /// Headline scalars by name, in a fixed order. `precision`, `recall` and
    /// `f1` are the support-weighted aggregates.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("accuracy", self.accuracy),
            ("precision", self.weighted_precision),
            ("recall", self.weighted_recall),
            ("f1", self.weighted_f1),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
        ];
        if let Some(loss) = self.mean_loss {
            out.push(("loss", loss));
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and aggregate precision/recall/F1. Any zero denominator yields
/// 0. `per_sample_losses` may be empty, in which case `mean_loss` is absent.
pub fn metrics_from_confusion(cm: &ConfusionMatrix, per_sample_losses: &[f64]) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("metrics_from_confusion: confusion matrix"));
    }
    let classes = cm.classes();
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| {
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..classes).map(|t| cm.counts[t][c]).sum();
            let support: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let macro_of = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
    let weighted_of =
        |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64;
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: macro_of(|m| m.precision),
        macro_recall: macro_of(|m| m.recall),
        macro_f1: macro_of(|m| m.f1),
        weighted_precision: weighted_of(|m| m.precision),
        weighted_recall: weighted_of(|m| m.recall),
        weighted_f1: weighted_of(|m| m.f1),
        mean_loss: mean(per_sample_losses),
        per_class,
    })
}

/// Number of a class's rows sent to the test side: `n·fraction` rounded to
/// nearest, exact halves going to train.
pub fn stratified_test_count(count: usize, fraction: f64) -> usize {
    let x = count as f64 * fraction;
    ((x - 0.5).ceil().max(0.0) as usize).min(count)
}

/// Row indices `(train, test)`, each ascending. Every class contributes
/// [`stratified_test_count`] rows to the test side, chosen by `rng`.
pub fn stratified_split_indices(labels: &[usize], classes: usize, test_fraction: f64, rng: &mut SeededRng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        by_class[l].push(i);
    }
    let mut train = Vec::with_capacity(labels.len());
    let mut test = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() == 1 {
            return Err(Error::ClassTooSmall {
                class,
                count: 1,
                needed: 2,
            });
        }
        rng.shuffle(&mut members);
        let n_test = stratified_test_count(members.len(), test_fraction);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn stratified_split(data: &LabeledDataset, test_fraction: f64, rng: &mut SeededRng) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = stratified_split_indices(&data.labels, data.num_classes(), test_fraction, rng)?;
    Ok((data.subset(&train), data.subset(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    #[serde(with = "crate::numerics::serde_float")]
    pub mean_difference: f64,
    #[serde(with = "crate::numerics::serde_float")]
    pub t_statistic: f64,
    #[serde(with = "crate::numerics::serde_float")]
    pub p_value: f64,
    pub degrees_of_freedom: usize,
    /// Differences had zero spread but a nonzero mean.
    pub degenerate_variance: bool,
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            op: "paired comparison",
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "paired comparison needs at least 2 pairs, got {}",
            a.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Two-sided `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom,
/// via the regularized incomplete beta `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn students_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Paired t-test on `d_i = a_i − b_i`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    let d = differences(a, b)?;
    let n = d.len();
    let m = mean(&d).expect("non-empty");
    let sd = sample_std(&d).expect("n >= 2");
    let df = n - 1;
    if sd == 0.0 {
        let zero = m == 0.0;
        return Ok(TTest {
            mean_difference: m,
            t_statistic: if zero { 0.0 } else { m.signum() * f64::INFINITY },
            p_value: if zero { 1.0 } else { 0.0 },
            degrees_of_freedom: df,
            degenerate_variance: !zero,
        });
    }
    let t = m * (n as f64).sqrt() / sd;
    Ok(TTest {
        mean_difference: m,
        t_statistic: t,
        p_value: students_t_two_sided_p(t, df as f64),
        degrees_of_freedom: df,
        degenerate_variance: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    #[serde(with = "crate::numerics::serde_float")]
    pub value: f64,
    pub degenerate: bool,
}

/// Paired Cohen's d: `mean(d) / sd(d)`. Identical inputs give 0; zero
/// spread with a nonzero mean gives a signed infinity flagged degenerate.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<EffectSize> {
    let d = differences(a, b)?;
    let m = mean(&d).expect("non-empty");
    let sd = sample_std(&d).expect("n >= 2");
    Ok(if sd == 0.0 {
        EffectSize {
            value: if m == 0.0 { 0.0 } else { m.signum() * f64::INFINITY },
            degenerate: m != 0.0,
        }
    } else {
        EffectSize {
            value: m / sd,
            degenerate: false,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    #[serde(with = "crate::numerics::serde_float")]
    pub mean_difference: f64,
    #[serde(with = "crate::numerics::serde_float")]
    pub t_statistic: f64,
    #[serde(with = "crate::numerics::serde_float")]
    pub p_value: f64,
    #[serde(with = "crate::numerics::serde_float")]
    pub cohens_d: f64,
    pub significant: bool,
    pub degenerate: bool,
}

/// t-test and effect size together, significance at 0.05.
pub fn compare_paired(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    let t = paired_t_test(a, b)?;
    let d = cohens_d(a, b)?;
    Ok(SignificanceResult {
        mean_difference: t.mean_difference,
        t_statistic: t.t_statistic,
        p_value: t.p_value,
        cohens_d: d.value,
        significant: t.p_value < SIGNIFICANCE_LEVEL,
        degenerate: t.degenerate_variance || d.degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    Ok(Summary {
        mean: mean(values).ok_or(Error::Empty("summarize: values"))?,
        std: sample_std(values),
    })
}

/// Mean and sample standard deviation of every scalar metric across runs.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<BTreeMap<String, Summary>> {
    if reports.is_empty() {
        return Err(Error::Empty("aggregate_runs: reports"));
    }
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (name, v) in r.scalars() {
            columns.entry(name.to_string()).or_default().push(v);
        }
    }
    columns
        .into_iter()
        .filter(|(_, v)| v.len() == reports.len())
        .map(|(k, v)| Ok((k, summarize(&v)?)))
        .collect()
}
