//! Dataset ingestion, feature encoding, the synthetic benchmark, and the
//! per-seed split/encode/resample pipeline that feeds training.

use std::collections::HashMap;
use std::path::Path;

use dbs_core::evaluation::stratified_split_indices;
use dbs_core::models::chunk_features;
use dbs_core::resampling::{adasyn_balance, smote_enn, LabeledDataset, ResampleSummary};
use dbs_core::{Matrix, SeededRng};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig, PreprocessSpec, ResamplerSpec, SyntheticSpec};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    FeatureCategorical,
    FeatureNumeric,
    Label,
    Ignore,
}

/// Column roles, read from `column = role` lines. Columns not listed are
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<(String, ColumnRole)>,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, role) = line
                .rsplit_once('=')
                .ok_or_else(|| HarnessError::Config(format!("schema line {}: expected `column = role`", lineno + 1)))?;
            let role = match role.trim() {
                "feature_categorical" | "categorical" => ColumnRole::FeatureCategorical,
                "feature_numeric" | "numeric" => ColumnRole::FeatureNumeric,
                "label" => ColumnRole::Label,
                "ignore" => ColumnRole::Ignore,
                other => {
                    return Err(HarnessError::Config(format!(
                        "schema line {}: unknown role '{other}'",
                        lineno + 1
                    )))
                }
            };
            columns.push((name.trim().to_string(), role));
        }
        let labels = columns.iter().filter(|(_, r)| *r == ColumnRole::Label).count();
        if labels != 1 {
            return Err(HarnessError::Config(format!("schema must declare exactly one label column, found {labels}")));
        }
        Ok(Self { columns })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn label_column(&self) -> &str {
        self.columns
            .iter()
            .find(|(_, r)| *r == ColumnRole::Label)
            .map(|(n, _)| n.as_str())
            .expect("validated at parse time")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RawColumn {
    Numeric { name: String, values: Vec<f64> },
    Categorical { name: String, values: Vec<String> },
}

/// Cleaned but not yet encoded rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub columns: Vec<RawColumn>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub raw_rows: usize,
    pub dropped_missing: usize,
    pub dropped_by_label_filter: usize,
    pub loaded: usize,
}

/// Reads a headed CSV, keeping schema-declared columns. Rows with a missing
/// or unparsable value in any used column are dropped and counted; rows
/// whose label is in `drop_labels` are removed. Labels become dense ids in
/// first-appearance order.
pub fn load_csv_dataset(path: &Path, schema: &Schema, preprocess: &PreprocessSpec) -> Result<(RawDataset, LoadReport)> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| HarnessError::Config(format!("{}: column '{name}' not in header", path.display())))
    };
    let label_at = position(schema.label_column())?;
    let mut used = Vec::new();
    for (name, role) in &schema.columns {
        if matches!(role, ColumnRole::FeatureCategorical | ColumnRole::FeatureNumeric) {
            used.push((name.clone(), *role, position(name)?));
        }
    }

    let is_missing = |v: &str| v.is_empty() || preprocess.missing_values.iter().any(|m| m == v);
    let mut report = LoadReport::default();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); used.len()];
    let mut categorical: Vec<Vec<String>> = vec![Vec::new(); used.len()];
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();
    let mut labels = Vec::new();
    let mut row_numbers = Vec::with_capacity(used.len());

    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        report.raw_rows += 1;
        let label = record.get(label_at).unwrap_or("").trim();
        if is_missing(label) {
            report.dropped_missing += 1;
            continue;
        }
        row_numbers.clear();
        let mut valid = true;
        for (_, role, at) in &used {
            let v = record.get(*at).unwrap_or("").trim();
            if is_missing(v) {
                valid = false;
                break;
            }
            if *role == ColumnRole::FeatureNumeric {
                match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => row_numbers.push(x),
                    _ => {
                        valid = false;
                        break;
                    }
                }
            } else {
                row_numbers.push(f64::NAN);
            }
        }
        if !valid {
            report.dropped_missing += 1;
            continue;
        }
        if preprocess.drop_labels.iter().any(|d| d == label) {
            report.dropped_by_label_filter += 1;
            continue;
        }
        let id = *class_ids.entry(label.to_string()).or_insert_with(|| {
            class_names.push(label.to_string());
            class_names.len() - 1
        });
        labels.push(id);
        for (k, (_, role, at)) in used.iter().enumerate() {
            match role {
                ColumnRole::FeatureNumeric => numeric[k].push(row_numbers[k]),
                _ => categorical[k].push(record.get(*at).unwrap_or("").trim().to_string()),
            }
        }
    }
    report.loaded = labels.len();
    if labels.is_empty() {
        return Err(HarnessError::Data(format!("{}: no usable rows", path.display())));
    }
    let columns = used
        .into_iter()
        .enumerate()
        .map(|(k, (name, role, _))| match role {
            ColumnRole::FeatureNumeric => RawColumn::Numeric {
                name,
                values: std::mem::take(&mut numeric[k]),
            },
            _ => RawColumn::Categorical {
                name,
                values: std::mem::take(&mut categorical[k]),
            },
        })
        .collect();
    Ok((
        RawDataset {
            columns,
            labels,
            class_names,
        },
        report,
    ))
}

/// Exact per-class counts for `n` rows: rounded shares, remainder to the
/// first class.
pub fn synthetic_class_counts(spec: &SyntheticSpec) -> Vec<usize> {
    let mut counts: Vec<usize> = spec.priors.iter().map(|p| (p * spec.samples as f64).round() as usize).collect();
    let assigned: usize = counts.iter().sum();
    if assigned > spec.samples {
        counts[0] -= assigned - spec.samples;
    } else {
        counts[0] += spec.samples - assigned;
    }
    counts
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> RawDataset {
    let classes = spec.priors.len();
    let block = spec.features / classes;
    let shift = spec.separation / (2.0 * block as f64).sqrt();
    let mut labels: Vec<usize> = synthetic_class_counts(spec)
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let mut rng = SeededRng::new(spec.seed);
    rng.shuffle(&mut labels);
    let mut columns = vec![Vec::with_capacity(spec.samples); spec.features];
    for &label in &labels {
        for (f, col) in columns.iter_mut().enumerate() {
            let mean = if f / block == label && f < block * classes { shift } else { 0.0 };
            col.push(mean + rng.normal());
        }
    }
    RawDataset {
        columns: columns
            .into_iter()
            .enumerate()
            .map(|(f, values)| RawColumn::Numeric {
                name: format!("x{f}"),
                values,
            })
            .collect(),
        labels,
        class_names: (0..classes).map(|c| format!("class_{c}")).collect(),
    }
}

/// Loads the configured dataset. The report is `None` for synthetic data.
pub fn load_dataset(config: &ExperimentConfig) -> Result<(RawDataset, Option<LoadReport>)> {
    match &config.dataset {
        DatasetSource::Synthetic(spec) => Ok((generate_synthetic(spec), None)),
        DatasetSource::Csv { path, schema } => {
            let schema = Schema::from_file(schema)?;
            let (raw, report) = load_csv_dataset(path, &schema, &config.preprocess)?;
            Ok((raw, Some(report)))
        }
    }
}

/// Z-score scale floor for (near-)constant columns.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnEncoder {
    OneHot { name: String, categories: Vec<String> },
    ZScore { name: String, mean: f64, std: f64 },
}

/// Encoding parameters fitted on training rows and reused for every other
/// row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<ColumnEncoder>,
}

impl Encoder {
    /// Categories in first-appearance order; population mean/std.
    pub fn fit(raw: &RawDataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(HarnessError::Data("cannot fit an encoder on zero rows".into()));
        }
        let columns = raw
            .columns
            .iter()
            .map(|col| match col {
                RawColumn::Categorical { name, values } => {
                    let mut categories: Vec<String> = Vec::new();
                    for &r in rows {
                        if !categories.contains(&values[r]) {
                            categories.push(values[r].clone());
                        }
                    }
                    ColumnEncoder::OneHot {
                        name: name.clone(),
                        categories,
                    }
                }
                RawColumn::Numeric { name, values } => {
                    let n = rows.len() as f64;
                    let mean = rows.iter().map(|&r| values[r]).sum::<f64>() / n;
                    let var = rows.iter().map(|&r| (values[r] - mean).powi(2)).sum::<f64>() / n;
                    ColumnEncoder::ZScore {
                        name: name.clone(),
                        mean,
                        std: var.sqrt(),
                    }
                }
            })
            .collect();
        Ok(Self { columns })
    }

    pub fn width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnEncoder::OneHot { categories, .. } => categories.len(),
                ColumnEncoder::ZScore { .. } => 1,
            })
            .sum()
    }

    /// Encoded rows plus the number of unseen categorical values, which are
    /// encoded as an all-zero block.
    pub fn transform(&self, raw: &RawDataset, rows: &[usize]) -> Result<(Matrix, usize)> {
        if raw.columns.len() != self.columns.len() {
            return Err(HarnessError::Data(format!(
                "encoder fitted on {} columns, dataset has {}",
                self.columns.len(),
                raw.columns.len()
            )));
        }
        let width = self.width();
        let mut out = Matrix::zeros(rows.len(), width);
        let mut unseen = 0;
        let mut offset = 0;
        for (enc, col) in self.columns.iter().zip(&raw.columns) {
            match (enc, col) {
                (ColumnEncoder::OneHot { categories, .. }, RawColumn::Categorical { values, .. }) => {
                    for (i, &r) in rows.iter().enumerate() {
                        match categories.iter().position(|c| *c == values[r]) {
                            Some(k) => out.set(i, offset + k, 1.0),
                            None => unseen += 1,
                        }
                    }
                    offset += categories.len();
                }
                (ColumnEncoder::ZScore { mean, std, .. }, RawColumn::Numeric { values, .. }) => {
                    let scale = std.max(STD_FLOOR);
                    for (i, &r) in rows.iter().enumerate() {
                        out.set(i, offset, (values[r] - mean) / scale);
                    }
                    offset += 1;
                }
                _ => return Err(HarnessError::Data("column kinds differ between encoder and dataset".into())),
            }
        }
        Ok((out, unseen))
    }
}

/// One seed's model-ready data.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub class_names: Vec<String>,
    pub encoder: Encoder,
    /// Encoded training rows after resampling.
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    /// Row indices into the raw dataset.
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub resample: Option<ResampleSummary>,
    pub unseen_categories: usize,
    pub sequence_length: usize,
}

/// Independent RNG streams of one run.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DROPOUT: u64 = 6;
}

/// Stratified train/test split, a stratified validation carve-out of the
/// training split, encoder fitting on the training split, and resampling
/// of the remaining training rows only. Depends on `seed` and the config,
/// never on the optimizer.
pub fn prepare(raw: &RawDataset, config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let root = SeededRng::new(seed);
    let classes = raw.class_names.len();
    let p = &config.preprocess;
    let (train_all, test_rows) = stratified_split_indices(&raw.labels, classes, p.test_fraction, &mut root.fork(streams::SPLIT))?;
    let train_labels: Vec<usize> = train_all.iter().map(|&r| raw.labels[r]).collect();
    let (fit_pos, val_pos) =
        stratified_split_indices(&train_labels, classes, p.validation_fraction, &mut root.fork(streams::VALIDATION))?;
    let train_rows: Vec<usize> = fit_pos.iter().map(|&i| train_all[i]).collect();
    let validation_rows: Vec<usize> = val_pos.iter().map(|&i| train_all[i]).collect();

    let encoder = Encoder::fit(raw, &train_all)?;
    let encode = |rows: &[usize]| -> Result<(LabeledDataset, usize)> {
        let (features, unseen) = encoder.transform(raw, rows)?;
        let labels = rows.iter().map(|&r| raw.labels[r]).collect();
        Ok((LabeledDataset::new(features, labels, raw.class_names.clone())?, unseen))
    };
    let (train, u1) = encode(&train_rows)?;
    let (validation, u2) = encode(&validation_rows)?;
    let (test, u3) = encode(&test_rows)?;

    let mut rng = root.fork(streams::RESAMPLE);
    let (train, resample) = match &config.resampler {
        ResamplerSpec::None => (train, None),
        ResamplerSpec::SmoteEnn { smote_k, enn_k } => {
            let (d, s) = smote_enn(&train, *smote_k, *enn_k, &mut rng)?;
            (d, Some(s))
        }
        ResamplerSpec::Adasyn { k } => {
            let (d, s) = adasyn_balance(&train, *k, &mut rng)?;
            (d, Some(s))
        }
    };
    Ok(PreparedData {
        class_names: raw.class_names.clone(),
        encoder,
        train,
        validation,
        test,
        train_rows,
        validation_rows,
        test_rows,
        resample,
        unseen_categories: u1 + u2 + u3,
        sequence_length: p.sequence_length,
    })
}

/// Cuts every row into a `sequence_length`-step sequence.
pub fn to_sequences(data: &LabeledDataset, sequence_length: usize) -> Result<Vec<Matrix>> {
    (0..data.len())
        .map(|i| chunk_features(data.features.row(i), sequence_length).map_err(HarnessError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    const SCHEMA: &str = "
age = numeric
road = categorical
time = ignore
severity = label
";

    #[test]
    fn loader_drops_blank_rows_and_maps_labels() {
        let csv = "age,road,time,severity
30,dry,1,Slight
,wet,2,Severe
41,wet,3,Severe
52,dry,4,Fatal
19,dry,,Slight
";
        let f = write_temp(csv);
        let schema = Schema::parse(SCHEMA).unwrap();
        let (raw, report) = load_csv_dataset(f.path(), &schema, &PreprocessSpec::default()).unwrap();
        assert_eq!(report.raw_rows, 5);
        assert_eq!(report.dropped_missing, 1);
        assert_eq!(report.loaded, 4);
        assert_eq!(raw.class_names, vec!["Slight", "Severe", "Fatal"]);
        assert_eq!(raw.labels, vec![0, 1, 2, 0]);
        assert_eq!(
            raw.columns[0],
            RawColumn::Numeric {
                name: "age".into(),
                values: vec![30.0, 41.0, 52.0, 19.0]
            }
        );
    }

    #[test]
    fn loader_filters_labels_and_invalid_numbers() {
        let csv = "age,road,time,severity
30,dry,1,Slight
abc,wet,2,Severe
41,wet,3,Unknown
52,na,4,Fatal
";
        let f = write_temp(csv);
        let schema = Schema::parse(SCHEMA).unwrap();
        let spec = PreprocessSpec {
            drop_labels: vec!["Unknown".into()],
            ..PreprocessSpec::default()
        };
        let (raw, report) = load_csv_dataset(f.path(), &schema, &spec).unwrap();
        assert_eq!(report.dropped_missing, 2);
        assert_eq!(report.dropped_by_label_filter, 1);
        assert_eq!(raw.class_names, vec!["Slight"]);
    }

    #[test]
    fn loader_errors() {
        let schema = Schema::parse(SCHEMA).unwrap();
        let missing = Path::new("/definitely/not/here.csv");
        assert!(matches!(
            load_csv_dataset(missing, &schema, &PreprocessSpec::default()),
            Err(HarnessError::Csv { .. })
        ));
        let f = write_temp("age,time,severity\n1,2,x\n");
        assert!(matches!(
            load_csv_dataset(f.path(), &schema, &PreprocessSpec::default()),
            Err(HarnessError::Config(_))
        ));
        let f = write_temp("age,road,time,severity\n,a,1,x\n");
        assert!(matches!(
            load_csv_dataset(f.path(), &schema, &PreprocessSpec::default()),
            Err(HarnessError::Data(_))
        ));
        assert!(Schema::parse("a = numeric").is_err());
        assert!(Schema::parse("a = label\nb = label").is_err());
        assert!(Schema::parse("a = label\nb = text").is_err());
    }

    fn raw_for_encoding() -> RawDataset {
        RawDataset {
            columns: vec![
                RawColumn::Categorical {
                    name: "road".into(),
                    values: ["dry", "wet", "icy", "dry", "gravel"].map(String::from).to_vec(),
                },
                RawColumn::Numeric {
                    name: "age".into(),
                    values: vec![10.0, 20.0, 30.0, 40.0, 50.0],
                },
                RawColumn::Numeric {
                    name: "lanes".into(),
                    values: vec![2.0; 5],
                },
            ],
            labels: vec![0, 1, 0, 1, 0],
            class_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn encoder_one_hot_and_zscore() {
        let raw = raw_for_encoding();
        let train = [0, 1, 2, 3];
        let enc = Encoder::fit(&raw, &train).unwrap();
        assert_eq!(enc.width(), 5);
        let (m, unseen) = enc.transform(&raw, &train).unwrap();
        assert_eq!(unseen, 0);
        for r in 0..4 {
            assert_eq!(m.row(r)[..3].iter().sum::<f64>(), 1.0);
            assert_eq!(m.get(r, 4), 0.0);
        }
        let col: Vec<f64> = (0..4).map(|r| m.get(r, 3)).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);

        let (m, unseen) = enc.transform(&raw, &[4]).unwrap();
        assert_eq!(unseen, 1);
        assert_eq!(&m.row(0)[..3], &[0.0, 0.0, 0.0]);

        let json = serde_json::to_string(&enc).unwrap();
        assert_eq!(serde_json::from_str::<Encoder>(&json).unwrap(), enc);
    }

    #[test]
    fn synthetic_benchmark_shape() {
        let spec = SyntheticSpec::default();
        assert_eq!(synthetic_class_counts(&spec), vec![700, 250, 50]);
        let raw = generate_synthetic(&spec);
        assert_eq!(raw.len(), 1000);
        assert_eq!(raw.columns.len(), 12);
        assert_eq!(raw.class_counts(), vec![700, 250, 50]);
        assert_eq!(generate_synthetic(&spec), raw);

        // Empirical class means approach the designed separation.
        let mean_of = |c: usize, f: usize| {
            let RawColumn::Numeric { values, .. } = &raw.columns[f] else { unreachable!() };
            let rows: Vec<f64> = (0..raw.len()).filter(|&i| raw.labels[i] == c).map(|i| values[i]).collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        };
        let shift = 2.0_f64.sqrt();
        assert!((mean_of(0, 0) - shift).abs() < 0.15);
        assert!(mean_of(0, 4).abs() < 0.15);
        assert!((mean_of(1, 5) - shift).abs() < 0.2);
    }

    #[test]
    fn prepare_keeps_test_rows_out_of_resampling() {
        let cfg = ExperimentConfig::default();
        let raw = generate_synthetic(&SyntheticSpec::default());
        let prepared = prepare(&raw, &cfg, 42).unwrap();
        assert_eq!(prepared.test_rows.len(), 200);
        assert_eq!(prepared.test.class_counts(), vec![140, 50, 10]);
        assert_eq!(prepared.validation.class_counts(), vec![56, 20, 4]);
        let all = [&prepared.train_rows[..], &prepared.validation_rows, &prepared.test_rows].concat();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 1000);

        let (full, _) = prepared.encoder.transform(&raw, &prepared.test_rows).unwrap();
        assert_eq!(full, prepared.test.features);
        let summary = prepared.resample.as_ref().unwrap();
        assert_eq!(summary.before, vec![504, 180, 36]);

        let again = prepare(&raw, &cfg, 42).unwrap();
        assert_eq!(again.train, prepared.train);
        assert_ne!(prepare(&raw, &cfg, 7).unwrap().test_rows, prepared.test_rows);
    }
}
