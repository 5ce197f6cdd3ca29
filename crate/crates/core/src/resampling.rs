//! Class-imbalance handling over a labeled feature matrix: SMOTE
//! interpolation, Edited Nearest Neighbours cleaning, the SMOTE-ENN pipeline
//! and ADASYN's density-weighted allocation.
//!
//! Neighbour search is exact brute force under Euclidean distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub const DEFAULT_SMOTE_K: usize = 5;
pub const DEFAULT_ENN_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    /// `N × F`
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                op: "LabeledDataset::new",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        let classes = class_names.len();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row indices of one class, ascending.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let cols = self.num_features();
        let mut values = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            values.extend_from_slice(self.features.row(i));
        }
        Self {
            features: Matrix::from_vec(indices.len(), cols, values).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Appends rows with a shared label.
    pub fn extend_rows(&mut self, rows: &[Vec<f64>], label: usize) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        if label >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.num_classes(),
            });
        }
        let cols = self.num_features();
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                op: "extend_rows",
                left: (self.len(), cols),
                right: (1, bad.len()),
            });
        }
        let n = self.len() + rows.len();
        let mut values = std::mem::replace(&mut self.features, Matrix::zeros(0, 0)).into_vec();
        for r in rows {
            values.extend_from_slice(r);
        }
        self.features = Matrix::from_vec(n, cols, values)?;
        self.labels.extend(std::iter::repeat_n(label, rows.len()));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Exact k-NN over the rows of a matrix, optionally restricted to a subset.
#[derive(Debug, Clone, Copy)]
pub struct NeighborIndex<'a> {
    features: &'a Matrix,
    rows: Option<&'a [usize]>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(features: &'a Matrix) -> Self {
        Self { features, rows: None }
    }

    /// Only `rows` are candidates; returned indices still refer to the matrix.
    pub fn over_rows(features: &'a Matrix, rows: &'a [usize]) -> Self {
        Self {
            features,
            rows: Some(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.map_or(self.features.rows(), <[usize]>::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `k` nearest candidates to `point`, skipping row `exclude`.
    /// Sorted by distance, ties by lower index.
    pub fn query(&self, point: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<Neighbor>> {
        if point.len() != self.features.cols() {
            return Err(Error::DimensionMismatch {
                op: "knn_query",
                left: self.features.shape(),
                right: (1, point.len()),
            });
        }
        let squared = |i: usize| -> f64 {
            self.features
                .row(i)
                .iter()
                .zip(point)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let mut candidates: Vec<(f64, usize)> = match self.rows {
            Some(rows) => rows.iter().filter(|&&i| Some(i) != exclude).map(|&i| (squared(i), i)).collect(),
            None => (0..self.features.rows())
                .filter(|&i| Some(i) != exclude)
                .map(|i| (squared(i), i))
                .collect(),
        };
        if k == 0 || k > candidates.len() {
            return Err(Error::NeighborCountOutOfRange {
                k,
                available: candidates.len(),
            });
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k - 1, order);
            candidates.truncate(k);
        }
        candidates.sort_unstable_by(order);
        Ok(candidates
            .into_iter()
            .map(|(d, index)| Neighbor {
                index,
                distance: d.sqrt(),
            })
            .collect())
    }

    /// Neighbours of one of the indexed rows, never including itself.
    pub fn neighbors_of(&self, row: usize, k: usize) -> Result<Vec<Neighbor>> {
        self.query(self.features.row(row), k, Some(row))
    }
}

/// `x + λ·(neighbor − x)`
pub fn smote_interpolate(x: &[f64], neighbor: &[f64], lambda: f64) -> Vec<f64> {
    x.iter().zip(neighbor).map(|(a, b)| a + lambda * (b - a)).collect()
}

/// A generated row together with the pair and weight that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub features: Vec<f64>,
    pub base: usize,
    pub neighbor: usize,
    pub lambda: f64,
}

fn check_class(data: &LabeledDataset, class: usize) -> Result<Vec<usize>> {
    if class >= data.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: data.num_classes(),
        });
    }
    let members = data.class_indices(class);
    if members.len() < 2 {
        return Err(Error::ClassTooSmall {
            class,
            count: members.len(),
            needed: 2,
        });
    }
    Ok(members)
}

/// Same-class neighbour lists for every member (by position in `members`).
fn member_neighbors(data: &LabeledDataset, members: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let index = NeighborIndex::over_rows(&data.features, members);
    members
        .iter()
        .map(|&i| Ok(index.neighbors_of(i, k)?.into_iter().map(|n| n.index).collect()))
        .collect()
}

fn interpolate_from(
    data: &LabeledDataset,
    base: usize,
    neighbors: &[usize],
    rng: &mut SeededRng,
) -> SyntheticSample {
    let neighbor = neighbors[rng.below(neighbors.len())];
    let lambda = rng.uniform();
    SyntheticSample {
        features: smote_interpolate(data.features.row(base), data.features.row(neighbor), lambda),
        base,
        neighbor,
        lambda,
    }
}

/// `n_synthetic` SMOTE rows for `target_class`: a random member, one of its
/// `k` same-class neighbours, and `λ ~ U[0, 1)`.
pub fn smote_generate(
    data: &LabeledDataset,
    target_class: usize,
    n_synthetic: usize,
    k: usize,
    rng: &mut SeededRng,
) -> Result<Vec<SyntheticSample>> {
    let members = check_class(data, target_class)?;
    if k == 0 || k > members.len() - 1 {
        return Err(Error::NeighborCountOutOfRange {
            k,
            available: members.len() - 1,
        });
    }
    if n_synthetic == 0 {
        return Ok(Vec::new());
    }
    let neighbors = member_neighbors(data, &members, k)?;
    Ok((0..n_synthetic)
        .map(|_| {
            let m = rng.below(members.len());
            interpolate_from(data, members[m], &neighbors[m], rng)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnnOutcome {
    pub data: LabeledDataset,
    /// Indices into the input, ascending.
    pub removed: Vec<usize>,
}

/// One pass of Edited Nearest Neighbours: a row survives only when its own
/// label strictly outnumbers every other label among its `k` neighbours.
pub fn enn_filter(data: &LabeledDataset, k: usize) -> Result<EnnOutcome> {
    if k == 0 || data.len() < k + 1 {
        return Err(Error::NeighborCountOutOfRange {
            k,
            available: data.len().saturating_sub(1),
        });
    }
    let index = NeighborIndex::new(&data.features);
    let mut kept = Vec::with_capacity(data.len());
    let mut removed = Vec::new();
    let mut votes = vec![0usize; data.num_classes()];
    for i in 0..data.len() {
        votes.iter_mut().for_each(|v| *v = 0);
        for n in index.neighbors_of(i, k)? {
            votes[data.labels[n.index]] += 1;
        }
        let own = data.labels[i];
        let agrees = votes.iter().enumerate().all(|(c, &v)| c == own || votes[own] > v);
        if agrees {
            kept.push(i);
        } else {
            removed.push(i);
        }
    }
    Ok(EnnOutcome {
        data: data.subset(&kept),
        removed,
    })
}

/// Per-class bookkeeping of a resampling pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResampleSummary {
    pub before: Vec<usize>,
    pub synthesized: Vec<usize>,
    pub removed: Vec<usize>,
    pub after: Vec<usize>,
    pub warnings: Vec<String>,
}

/// SMOTE every non-majority class up to the majority count, then one ENN
/// pass over originals and synthetics together.
///
/// `smote_k` is clamped to `count − 1` for classes too small to supply it.
/// Absent classes are left absent.
pub fn smote_enn(
    data: &LabeledDataset,
    smote_k: usize,
    enn_k: usize,
    rng: &mut SeededRng,
) -> Result<(LabeledDataset, ResampleSummary)> {
    let before = data.class_counts();
    let majority = before.iter().copied().max().unwrap_or(0);
    let mut augmented = data.clone();
    let mut synthesized = vec![0; before.len()];
    let mut warnings = Vec::new();
    for (class, &count) in before.iter().enumerate() {
        // One sub-seed per class keeps each class's draws independent.
        let mut class_rng = SeededRng::new(rng.next_u64());
        if count == 0 || count == majority {
            continue;
        }
        let k = smote_k.min(count.saturating_sub(1));
        if k < smote_k && count >= 2 {
            warnings.push(format!(
                "class {class} has {count} samples; SMOTE k reduced from {smote_k} to {k}"
            ));
        }
        let rows = smote_generate(data, class, majority - count, k, &mut class_rng)?;
        synthesized[class] = rows.len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|s| s.features).collect();
        augmented.extend_rows(&rows, class)?;
    }
    let outcome = enn_filter(&augmented, enn_k)?;
    let mut removed = vec![0; before.len()];
    for &i in &outcome.removed {
        removed[augmented.labels[i]] += 1;
    }
    let summary = ResampleSummary {
        after: outcome.data.class_counts(),
        before,
        synthesized,
        removed,
        warnings,
    };
    Ok((outcome.data, summary))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdasynAllocation {
    /// Members of the target class, as row indices.
    pub members: Vec<usize>,
    /// Fraction of each member's `k` neighbours from other classes.
    pub ratios: Vec<f64>,
    /// `ratios` normalized to sum to one (all zero when the sum is zero).
    pub weights: Vec<f64>,
    /// Synthetic rows assigned to each member.
    pub counts: Vec<usize>,
    pub warning: Option<String>,
}

/// ADASYN allocation of `total` synthetic rows over the members of
/// `target_class`, using `k` neighbours drawn from the whole dataset.
/// Shares are rounded half-up, so the sum may differ from `total` by at
/// most the member count.
pub fn adasyn_allocation(data: &LabeledDataset, target_class: usize, total: usize, k: usize) -> Result<AdasynAllocation> {
    let members = check_class(data, target_class)?;
    let index = NeighborIndex::new(&data.features);
    let ratios = members
        .iter()
        .map(|&i| {
            let others = index
                .neighbors_of(i, k)?
                .iter()
                .filter(|n| data.labels[n.index] != target_class)
                .count();
            Ok(others as f64 / k as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let sum: f64 = ratios.iter().sum();
    if sum == 0.0 {
        return Ok(AdasynAllocation {
            counts: vec![0; members.len()],
            weights: vec![0.0; members.len()],
            ratios,
            members,
            warning: Some(format!(
                "no member of class {target_class} has a neighbour from another class; nothing synthesized"
            )),
        });
    }
    let weights: Vec<f64> = ratios.iter().map(|r| r / sum).collect();
    let counts = weights.iter().map(|w| (w * total as f64 + 0.5).floor() as usize).collect();
    Ok(AdasynAllocation {
        members,
        ratios,
        weights,
        counts,
        warning: None,
    })
}

/// ADASYN: allocate with [`adasyn_allocation`], then interpolate towards
/// same-class neighbours (`k` clamped to the class size).
pub fn adasyn_generate(
    data: &LabeledDataset,
    target_class: usize,
    total: usize,
    k: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<SyntheticSample>, AdasynAllocation)> {
    let allocation = adasyn_allocation(data, target_class, total, k)?;
    let inner_k = k.min(allocation.members.len() - 1);
    if allocation.counts.iter().all(|&c| c == 0) {
        return Ok((Vec::new(), allocation));
    }
    let neighbors = member_neighbors(data, &allocation.members, inner_k)?;
    let mut out = Vec::with_capacity(allocation.counts.iter().sum());
    for (m, &count) in allocation.counts.iter().enumerate() {
        for _ in 0..count {
            out.push(interpolate_from(data, allocation.members[m], &neighbors[m], rng));
        }
    }
    Ok((out, allocation))
}

/// ADASYN every non-majority class towards the majority count.
pub fn adasyn_balance(data: &LabeledDataset, k: usize, rng: &mut SeededRng) -> Result<(LabeledDataset, ResampleSummary)> {
    let before = data.class_counts();
    let majority = before.iter().copied().max().unwrap_or(0);
    let mut out = data.clone();
    let mut synthesized = vec![0; before.len()];
    let mut warnings = Vec::new();
    for (class, &count) in before.iter().enumerate() {
        let mut class_rng = SeededRng::new(rng.next_u64());
        if count == 0 || count == majority {
            continue;
        }
        let (rows, allocation) = adasyn_generate(data, class, majority - count, k, &mut class_rng)?;
        warnings.extend(allocation.warning);
        synthesized[class] = rows.len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|s| s.features).collect();
        out.extend_rows(&rows, class)?;
    }
    let summary = ResampleSummary {
        after: out.class_counts(),
        before,
        synthesized,
        removed: vec![0; data.num_classes()],
        warnings,
    };
    Ok((out, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: Vec<usize>,
    pub percentages: Vec<f64>,
}

pub fn class_distribution(data: &LabeledDataset) -> ClassDistribution {
    distribution_from_counts(data.class_counts())
}

pub fn distribution_from_counts(counts: Vec<usize>) -> ClassDistribution {
    let total: usize = counts.iter().sum();
    let percentages = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
        .collect();
    ClassDistribution { counts, percentages }
}
