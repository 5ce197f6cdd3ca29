//! Experiment configuration: a flat `key = value` file plus overrides.
//!
//! Lines starting with `#` are comments. Lists are comma separated and may be
//! wrapped in brackets (`drop_labels = [Unknown]`). Every key is listed in
//! [`KEYS`]; unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dbs_core::losses::Alpha;
use dbs_core::models::{Aggregation, NetworkShape};
use dbs_core::optimizers::{DifficultyConfig, EpsilonPlacement, GradNormMode, OptimizerConfig, OptimizerKind};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const PAPER_SEEDS: [u64; 5] = [42, 123, 456, 789, 1024];
pub const PAPER_BETA_GRID: [f64; 4] = [0.8, 0.9, 0.95, 0.99];
pub const PAPER_ALPHA_GRID: [f64; 3] = [0.3, 0.5, 0.7];

/// Gaussian benchmark. Features are cut into one block per class; class `c`
/// has mean `separation / √(2·block)` on every column of block `c`, zero
/// elsewhere, and unit noise, so class means sit `separation` standard
/// deviations apart pairwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub features: usize,
    pub priors: Vec<f64>,
    pub separation: f64,
    /// Seed of the generated dataset, independent of the run seeds.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 1000,
            features: 12,
            priors: vec![0.70, 0.25, 0.05],
            separation: 4.0,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf, schema: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    /// Timesteps per sample; each encoded row is cut into this many chunks.
    pub sequence_length: usize,
    pub test_fraction: f64,
    /// Share of the training split held out for early stopping.
    pub validation_fraction: f64,
    pub drop_labels: Vec<String>,
    /// Cell values treated as missing, besides the empty string.
    pub missing_values: Vec<String>,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            sequence_length: 1,
            test_fraction: 0.2,
            validation_fraction: 0.1,
            drop_labels: Vec::new(),
            missing_values: vec!["na".into(), "NA".into(), "NaN".into(), "nan".into(), "?".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResamplerSpec {
    None,
    SmoteEnn { smote_k: usize, enn_k: usize },
    Adasyn { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    CrossEntropy,
    /// `None` derives `N / (N_c · C)` from the training rows.
    WeightedCrossEntropy { class_weights: Option<Vec<f64>> },
    Focal { gamma: f64, alpha: Alpha },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden1: usize,
    pub hidden2: usize,
    pub dense_units: usize,
    pub dropout: f64,
    pub aggregation: Aggregation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden1: 256,
            hidden2: 128,
            dense_units: 64,
            dropout: 0.4,
            aggregation: Aggregation::Last,
        }
    }
}

impl ModelSpec {
    pub fn shape(&self, input_width: usize, classes: usize) -> NetworkShape {
        NetworkShape {
            input_width,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            dense_units: self.dense_units,
            classes,
            dropout_rate: self.dropout,
            aggregation: self.aggregation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSpec {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 30,
            patience: 6,
            seeds: PAPER_SEEDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub beta_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    /// The first this-many entries of `seeds` are used per cell.
    pub seeds_per_cell: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            beta_grid: PAPER_BETA_GRID.to_vec(),
            alpha_grid: PAPER_ALPHA_GRID.to_vec(),
            seeds_per_cell: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub preprocess: PreprocessSpec,
    pub resampler: ResamplerSpec,
    pub model: ModelSpec,
    pub loss: LossSpec,
    /// Optimizer for `train` and `sweep`.
    pub optimizer: OptimizerKind,
    /// Optimizers for `compare`.
    pub optimizers: Vec<OptimizerKind>,
    pub optimizer_config: OptimizerConfig,
    pub difficulty: DifficultyConfig,
    pub training: TrainingSpec,
    pub sweep: SweepSpec,
    pub output_dir: PathBuf,
    /// Worker threads for parallel runs; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            preprocess: PreprocessSpec::default(),
            resampler: ResamplerSpec::SmoteEnn { smote_k: 5, enn_k: 3 },
            model: ModelSpec::default(),
            loss: LossSpec::Focal {
                gamma: 2.0,
                alpha: Alpha::Uniform(0.25),
            },
            optimizer: OptimizerKind::DbsAdam,
            optimizers: OptimizerKind::ALL.to_vec(),
            optimizer_config: OptimizerConfig::default(),
            difficulty: DifficultyConfig::default(),
            training: TrainingSpec::default(),
            sweep: SweepSpec::default(),
            output_dir: PathBuf::from("results"),
            threads: 0,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("name", "label stored in reports"),
    ("dataset", "`synthetic` or a CSV path (relative to the config file)"),
    ("schema", "column-role file for CSV datasets"),
    ("drop_labels", "label values whose rows are removed at load time"),
    ("missing_values", "cell values treated as missing besides the empty string"),
    ("synthetic_samples", "rows generated by the synthetic benchmark"),
    ("synthetic_features", "feature count of the synthetic benchmark"),
    ("synthetic_priors", "class priors of the synthetic benchmark"),
    ("synthetic_separation", "pairwise class-mean distance in noise standard deviations"),
    ("synthetic_seed", "seed of the generated dataset"),
    ("sequence_length", "timesteps per sample (features are chunked and zero-padded)"),
    ("test_fraction", "stratified test share"),
    ("validation_fraction", "stratified share of the training split used for early stopping"),
    ("resampler", "`none`, `smote_enn` or `adasyn` (training rows only)"),
    ("smote_k", "SMOTE neighbour count"),
    ("enn_k", "ENN neighbour count"),
    ("adasyn_k", "ADASYN neighbour count"),
    ("hidden1", "units of the first Bi-LSTM layer"),
    ("hidden2", "units of the second Bi-LSTM layer"),
    ("dense_units", "units of the ReLU dense layer"),
    ("dropout", "dropout rate after each Bi-LSTM and the dense layer"),
    ("aggregation", "`last` or `mean` over the second layer's outputs"),
    ("loss", "`focal`, `weighted_cross_entropy` or `cross_entropy`"),
    ("focal_gamma", "focusing parameter γ"),
    ("focal_alpha", "one balance weight, or one per class"),
    ("class_weights", "`auto` or one weight per class"),
    ("optimizer", "optimizer for train and sweep"),
    ("optimizers", "optimizers for compare"),
    ("lr", "base learning rate η₀"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("epsilon", "denominator ε"),
    ("epsilon_placement", "`outside_sqrt` or `inside_sqrt`"),
    ("weight_decay", "AdamW decoupled decay"),
    ("final_lr", "AdaBound final learning rate"),
    ("bound_gamma", "AdaBound bound convergence speed"),
    ("ema_beta", "EMA decay of the difficulty statistics"),
    ("alpha", "weight of the gradient-norm signal in the difficulty mix"),
    ("clip_k", "z-score clipping bound"),
    ("d_min", "lower difficulty bound"),
    ("d_max", "upper difficulty bound"),
    ("warmup_batches", "batches that emit the neutral difficulty 0.5"),
    ("norm_epsilon", "floor added to the EMA deviation"),
    ("grad_norm_mode", "`global_l2` or `mean_per_tensor`"),
    ("pinned_difficulty", "constant difficulty, or `none`"),
    ("batch_size", "minibatch size"),
    ("max_epochs", "epoch cap"),
    ("patience", "epochs without validation improvement before stopping"),
    ("seeds", "run seeds"),
    ("seed", "single run seed (replaces `seeds`)"),
    ("beta_grid", "sweep values of ema_beta"),
    ("alpha_grid", "sweep values of alpha"),
    ("sweep_seeds", "seeds per sweep cell (taken from the front of `seeds`)"),
    ("output_dir", "report directory"),
    ("threads", "parallel runs; 0 = one per core"),
];

fn strip_list(value: &str) -> &str {
    let v = value.trim();
    v.strip_prefix('[').and_then(|v| v.strip_suffix(']')).unwrap_or(v)
}

fn list(value: &str) -> Vec<String> {
    strip_list(value)
        .split(',')
        .map(|s| s.trim().trim_matches('"').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    list(value).iter().map(|v| parse(key, v)).collect()
}

fn enum_value<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    let v = value.trim();
    options.iter().find(|(name, _)| *name == v).map(|&(_, t)| t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        HarnessError::Config(format!("{key}: expected one of {names:?}, got '{v}'"))
    })
}

impl ExperimentConfig {
    /// Reads a config file. Relative `dataset` and `schema` paths are
    /// resolved against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        cfg.apply_text(&text, Some(base))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        let mut schema: Option<PathBuf> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let resolve = |p: &str| match base {
                Some(b) if Path::new(p).is_relative() => b.join(p),
                _ => PathBuf::from(p),
            };
            match key {
                "schema" => schema = Some(resolve(value)),
                "dataset" if value != "synthetic" => self.set("dataset", &resolve(value).to_string_lossy())?,
                "output_dir" => self.output_dir = PathBuf::from(value),
                _ => self.set(key, value)?,
            }
        }
        if let Some(s) = schema {
            self.set("schema", &s.to_string_lossy())?;
        }
        Ok(())
    }

    fn synthetic_mut(&mut self, key: &str) -> Result<&mut SyntheticSpec> {
        match &mut self.dataset {
            DatasetSource::Synthetic(s) => Ok(s),
            DatasetSource::Csv { .. } => Err(HarnessError::Config(format!("{key} applies only to the synthetic dataset"))),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let oc = &mut self.optimizer_config;
        let dc = &mut self.difficulty;
        match key {
            "name" => self.name = value.to_string(),
            "dataset" => {
                if value == "synthetic" {
                    if !matches!(self.dataset, DatasetSource::Synthetic(_)) {
                        self.dataset = DatasetSource::Synthetic(SyntheticSpec::default());
                    }
                } else {
                    let schema = match &self.dataset {
                        DatasetSource::Csv { schema, .. } => schema.clone(),
                        DatasetSource::Synthetic(_) => PathBuf::new(),
                    };
                    self.dataset = DatasetSource::Csv {
                        path: PathBuf::from(value),
                        schema,
                    };
                }
            }
            "schema" => match &mut self.dataset {
                DatasetSource::Csv { schema, .. } => *schema = PathBuf::from(value),
                DatasetSource::Synthetic(_) => {
                    return Err(HarnessError::Config("schema set but dataset is synthetic".into()))
                }
            },
            "drop_labels" => self.preprocess.drop_labels = list(value),
            "missing_values" => self.preprocess.missing_values = list(value),
            "synthetic_samples" => self.synthetic_mut(key)?.samples = parse(key, value)?,
            "synthetic_features" => self.synthetic_mut(key)?.features = parse(key, value)?,
            "synthetic_priors" => self.synthetic_mut(key)?.priors = parse_list(key, value)?,
            "synthetic_separation" => self.synthetic_mut(key)?.separation = parse(key, value)?,
            "synthetic_seed" => self.synthetic_mut(key)?.seed = parse(key, value)?,
            "sequence_length" => self.preprocess.sequence_length = parse(key, value)?,
            "test_fraction" => self.preprocess.test_fraction = parse(key, value)?,
            "validation_fraction" => self.preprocess.validation_fraction = parse(key, value)?,
            "resampler" => {
                self.resampler = match value {
                    "none" => ResamplerSpec::None,
                    "smote_enn" => ResamplerSpec::SmoteEnn { smote_k: 5, enn_k: 3 },
                    "adasyn" => ResamplerSpec::Adasyn { k: 5 },
                    _ => {
                        return Err(HarnessError::Config(format!(
                            "resampler: expected none, smote_enn or adasyn, got '{value}'"
                        )))
                    }
                }
            }
            "smote_k" | "enn_k" => match &mut self.resampler {
                ResamplerSpec::SmoteEnn { smote_k, enn_k } => {
                    *(if key == "smote_k" { smote_k } else { enn_k }) = parse(key, value)?
                }
                _ => return Err(HarnessError::Config(format!("{key} requires resampler = smote_enn"))),
            },
            "adasyn_k" => match &mut self.resampler {
                ResamplerSpec::Adasyn { k } => *k = parse(key, value)?,
                _ => return Err(HarnessError::Config(format!("{key} requires resampler = adasyn"))),
            },
            "hidden1" => self.model.hidden1 = parse(key, value)?,
            "hidden2" => self.model.hidden2 = parse(key, value)?,
            "dense_units" => self.model.dense_units = parse(key, value)?,
            "dropout" => self.model.dropout = parse(key, value)?,
            "aggregation" => {
                self.model.aggregation =
                    enum_value(key, value, &[("last", Aggregation::Last), ("mean", Aggregation::Mean)])?
            }
            "loss" => {
                self.loss = match value {
                    "cross_entropy" => LossSpec::CrossEntropy,
                    "weighted_cross_entropy" => LossSpec::WeightedCrossEntropy { class_weights: None },
                    "focal" => LossSpec::Focal {
                        gamma: 2.0,
                        alpha: Alpha::Uniform(0.25),
                    },
                    _ => {
                        return Err(HarnessError::Config(format!(
                            "loss: expected focal, weighted_cross_entropy or cross_entropy, got '{value}'"
                        )))
                    }
                }
            }
            "focal_gamma" | "focal_alpha" => match &mut self.loss {
                LossSpec::Focal { gamma, alpha } => {
                    if key == "focal_gamma" {
                        *gamma = parse(key, value)?;
                    } else {
                        let v: Vec<f64> = parse_list(key, value)?;
                        *alpha = match v.as_slice() {
                            [a] => Alpha::Uniform(*a),
                            _ => Alpha::PerClass(v),
                        };
                    }
                }
                _ => return Err(HarnessError::Config(format!("{key} requires loss = focal"))),
            },
            "class_weights" => match &mut self.loss {
                LossSpec::WeightedCrossEntropy { class_weights } => {
                    *class_weights = if value == "auto" { None } else { Some(parse_list(key, value)?) }
                }
                _ => return Err(HarnessError::Config(format!("{key} requires loss = weighted_cross_entropy"))),
            },
            "optimizer" => self.optimizer = value.parse().map_err(|e: dbs_core::Error| HarnessError::Config(e.to_string()))?,
            "optimizers" => {
                self.optimizers = list(value)
                    .iter()
                    .map(|v| v.parse().map_err(|e: dbs_core::Error| HarnessError::Config(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "lr" => oc.base_lr = parse(key, value)?,
            "beta1" => oc.beta1 = parse(key, value)?,
            "beta2" => oc.beta2 = parse(key, value)?,
            "epsilon" => oc.epsilon = parse(key, value)?,
            "epsilon_placement" => {
                oc.eps_placement = enum_value(
                    key,
                    value,
                    &[
                        ("outside_sqrt", EpsilonPlacement::OutsideSqrt),
                        ("inside_sqrt", EpsilonPlacement::InsideSqrt),
                    ],
                )?
            }
            "weight_decay" => oc.weight_decay = parse(key, value)?,
            "final_lr" => oc.adabound_final_lr = parse(key, value)?,
            "bound_gamma" => oc.adabound_gamma = parse(key, value)?,
            "ema_beta" => dc.ema_beta = parse(key, value)?,
            "alpha" => dc.alpha_mix = parse(key, value)?,
            "clip_k" => dc.clip_k = parse(key, value)?,
            "d_min" => dc.d_min = parse(key, value)?,
            "d_max" => dc.d_max = parse(key, value)?,
            "warmup_batches" => dc.warmup_batches = parse(key, value)?,
            "norm_epsilon" => dc.norm_epsilon = parse(key, value)?,
            "grad_norm_mode" => {
                dc.grad_norm_mode = enum_value(
                    key,
                    value,
                    &[
                        ("global_l2", GradNormMode::GlobalL2),
                        ("mean_per_tensor", GradNormMode::MeanPerTensor),
                    ],
                )?
            }
            "pinned_difficulty" => dc.pinned = if value == "none" { None } else { Some(parse(key, value)?) },
            "batch_size" => self.training.batch_size = parse(key, value)?,
            "max_epochs" => self.training.max_epochs = parse(key, value)?,
            "patience" => self.training.patience = parse(key, value)?,
            "seeds" => self.training.seeds = parse_list(key, value)?,
            "seed" => self.training.seeds = vec![parse(key, value)?],
            "beta_grid" => self.sweep.beta_grid = parse_list(key, value)?,
            "alpha_grid" => self.sweep.alpha_grid = parse_list(key, value)?,
            "sweep_seeds" => self.sweep.seeds_per_cell = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(HarnessError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` override strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        let t = &self.training;
        if t.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if t.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if t.patience > t.max_epochs {
            return bad(format!("patience {} exceeds max_epochs {}", t.patience, t.max_epochs));
        }
        if t.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if t.seeds.iter().collect::<BTreeSet<_>>().len() != t.seeds.len() {
            return bad(format!("seeds must be distinct: {:?}", t.seeds));
        }
        let p = &self.preprocess;
        if p.sequence_length == 0 {
            return bad("sequence_length must be >= 1".into());
        }
        for (name, f) in [("test_fraction", p.test_fraction), ("validation_fraction", p.validation_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1), got {f}"));
            }
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.priors.len() < 2 || s.features < s.priors.len() || s.samples == 0 {
                return bad(format!("synthetic benchmark needs >= 2 classes, features >= classes, samples > 0: {s:?}"));
            }
            if s.priors.iter().any(|&p| !(p > 0.0)) || (s.priors.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return bad(format!("synthetic priors must be positive and sum to 1: {:?}", s.priors));
            }
        }
        if let DatasetSource::Csv { schema, .. } = &self.dataset {
            if schema.as_os_str().is_empty() {
                return bad("CSV datasets need a schema file".into());
            }
        }
        match &self.resampler {
            ResamplerSpec::SmoteEnn { smote_k, enn_k } if *smote_k == 0 || *enn_k == 0 => {
                return bad("smote_k and enn_k must be >= 1".into())
            }
            ResamplerSpec::Adasyn { k } if *k == 0 => return bad("adasyn_k must be >= 1".into()),
            _ => {}
        }
        if let LossSpec::Focal { gamma, .. } = &self.loss {
            if !(*gamma >= 0.0) {
                return bad(format!("focal_gamma must be >= 0, got {gamma}"));
            }
        }
        self.model
            .shape(1, 2)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.optimizer_config
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.difficulty
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.sweep.beta_grid.is_empty() || self.sweep.alpha_grid.is_empty() {
            return bad("sweep grids must not be empty".into());
        }
        if self.sweep.seeds_per_cell == 0 {
            return bad("sweep_seeds must be >= 1".into());
        }
        Ok(())
    }

    /// Seeds used by each sweep cell.
    pub fn sweep_seeds(&self) -> Vec<u64> {
        self.training.seeds.iter().copied().take(self.sweep.seeds_per_cell).collect()
    }
}
