//! Adam, AMSGrad, AdamW, AdaBound and the batch-difficulty-scaled Adam
//! (DBS-Adam).
//!
//! Parameters are handed to the optimizers as a list of tensors
//! (`&mut [&mut [f64]]`) with matching gradient tensors. State buffers are
//! shaped on the first step and checked on every later one.
//!
//! DBS-Adam scores every batch by how its gradient norm and mean loss compare
//! with exponential moving averages of both, turns the score into a
//! multiplier in `[d_min, d_max]`, and runs a plain Adam update with the base
//! learning rate scaled by that multiplier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::l2_norm;

/// Where ε enters the Adam denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonPlacement {
    /// `√v̂ + ε`
    #[default]
    OutsideSqrt,
    /// `√(v̂ + ε)`
    InsideSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay λ (AdamW only).
    pub weight_decay: f64,
    pub adabound_final_lr: f64,
    pub adabound_gamma: f64,
    pub eps_placement: EpsilonPlacement,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            weight_decay: 0.01,
            adabound_final_lr: 0.1,
            adabound_gamma: 1e-3,
            eps_placement: EpsilonPlacement::OutsideSqrt,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.adabound_final_lr > 0.0) || !(self.adabound_gamma > 0.0) {
            return bad("adabound_final_lr and adabound_gamma must be > 0".into());
        }
        Ok(())
    }

    #[inline]
    fn denominator(&self, v_hat: f64) -> f64 {
        match self.eps_placement {
            EpsilonPlacement::OutsideSqrt => v_hat.sqrt() + self.epsilon,
            EpsilonPlacement::InsideSqrt => (v_hat + self.epsilon).sqrt(),
        }
    }
}

/// Moment buffers and step counter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Running elementwise max of v̂ (AMSGrad only).
    pub v_max: Option<Vec<Vec<f64>>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure_shape(&mut self, shapes: &[usize], with_vmax: bool) -> Result<()> {
        if self.m.is_empty() && self.t == 0 {
            self.m = shapes.iter().map(|&n| vec![0.0; n]).collect();
            self.v = self.m.clone();
        }
        let current: Vec<usize> = self.m.iter().map(Vec::len).collect();
        if current != shapes {
            return Err(Error::InvalidArgument(format!(
                "optimizer state shaped {current:?} but parameters are {shapes:?}"
            )));
        }
        if with_vmax && self.v_max.is_none() {
            self.v_max = Some(self.v.iter().map(|v| vec![0.0; v.len()]).collect());
        }
        Ok(())
    }
}

fn check_inputs(params: &[&mut [f64]], grads: &[&[f64]]) -> Result<Vec<usize>> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch {
            op: "optimizer step (tensor count)",
            left: (params.len(), 1),
            right: (grads.len(), 1),
        });
    }
    let mut offset = 0;
    let mut shapes = Vec::with_capacity(params.len());
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::DimensionMismatch {
                op: "optimizer step (tensor length)",
                left: (p.len(), 1),
                right: (g.len(), 1),
            });
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "gradient",
                index: offset + i,
            });
        }
        offset += g.len();
        shapes.push(p.len());
    }
    Ok(shapes)
}

#[derive(Clone, Copy)]
enum Variant {
    Adam,
    AmsGrad,
    AdamW,
    AdaBound,
}

fn moment_step(
    variant: Variant,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr: f64,
) -> Result<()> {
    let shapes = check_inputs(params, grads)?;
    state.ensure_shape(&shapes, matches!(variant, Variant::AmsGrad))?;
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let (lower, upper) = adabound_bounds(config, state.t);
    let decay = match variant {
        Variant::AdamW if config.weight_decay != 0.0 => Some(1.0 - lr * config.weight_decay),
        _ => None,
    };

    for (ti, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        let mut v_max = state.v_max.as_mut().map(|vm| &mut vm[ti]);
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let mut v_hat = v[j] / bc2;
            if let (Variant::AmsGrad, Some(vm)) = (variant, v_max.as_mut()) {
                vm[j] = vm[j].max(v_hat);
                v_hat = vm[j];
            }
            let step = match variant {
                Variant::AdaBound => {
                    let rate = (lr / config.denominator(v_hat)).clamp(lower, upper);
                    rate * m_hat
                }
                _ => lr * m_hat / config.denominator(v_hat),
            };
            if let Some(keep) = decay {
                p[j] *= keep;
            }
            p[j] -= step;
        }
    }
    Ok(())
}

/// One Adam update. Uses `lr_override` in place of `config.base_lr` when given.
pub fn adam_step(
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr_override: Option<f64>,
) -> Result<()> {
    moment_step(Variant::Adam, state, config, params, grads, lr_override.unwrap_or(config.base_lr))
}

/// Adam with the denominator built from the running max of v̂.
pub fn amsgrad_step(
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr_override: Option<f64>,
) -> Result<()> {
    moment_step(Variant::AmsGrad, state, config, params, grads, lr_override.unwrap_or(config.base_lr))
}

/// Adam plus decoupled decay `θ ← θ − η·λ·θ`.
pub fn adamw_step(
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr_override: Option<f64>,
) -> Result<()> {
    moment_step(Variant::AdamW, state, config, params, grads, lr_override.unwrap_or(config.base_lr))
}

/// Adam with the per-coordinate rate `η / denom` clipped into
/// `[lb(t), ub(t)]`.
pub fn adabound_step(
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr_override: Option<f64>,
) -> Result<()> {
    moment_step(Variant::AdaBound, state, config, params, grads, lr_override.unwrap_or(config.base_lr))
}

/// `(lb(t), ub(t)) = (f·(1 − 1/(γt + 1)), f·(1 + 1/(γt)))`.
pub fn adabound_bounds(config: &OptimizerConfig, t: u64) -> (f64, f64) {
    let f = config.adabound_final_lr;
    let gt = config.adabound_gamma * t as f64;
    (f * (1.0 - 1.0 / (gt + 1.0)), f * (1.0 + 1.0 / gt))
}

/// How the scalar gradient norm G_t is formed from the gradient tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNormMode {
    /// L2 norm of all gradients concatenated.
    #[default]
    GlobalL2,
    /// Mean of the per-tensor L2 norms.
    MeanPerTensor,
}

pub fn gradient_norm(grads: &[&[f64]], mode: GradNormMode) -> f64 {
    match mode {
        GradNormMode::GlobalL2 => grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt(),
        GradNormMode::MeanPerTensor => {
            if grads.is_empty() {
                0.0
            } else {
                grads.iter().map(|g| l2_norm(g)).sum::<f64>() / grads.len() as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyConfig {
    /// EMA decay β.
    pub ema_beta: f64,
    /// Weight α of the gradient signal in the mix.
    pub alpha_mix: f64,
    /// z-score clipping bound K.
    pub clip_k: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub norm_epsilon: f64,
    /// Batches that only accumulate statistics and emit the neutral score.
    pub warmup_batches: u64,
    pub grad_norm_mode: GradNormMode,
    /// Emit this constant (clipped) instead of the tracked score.
    pub pinned: Option<f64>,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            ema_beta: 0.95,
            alpha_mix: 0.5,
            clip_k: 5.0,
            d_min: 0.1,
            d_max: 1.0,
            norm_epsilon: 1e-8,
            warmup_batches: 10,
            grad_norm_mode: GradNormMode::GlobalL2,
            pinned: None,
        }
    }
}

impl DifficultyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad(format!("ema_beta must lie in [0, 1), got {}", self.ema_beta));
        }
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha_mix));
        }
        if !(self.clip_k > 0.0) {
            return bad(format!("clip_k must be > 0, got {}", self.clip_k));
        }
        if !(self.d_min > 0.0 && self.d_min <= self.d_max) {
            return bad(format!(
                "need 0 < d_min <= d_max, got [{}, {}]",
                self.d_min, self.d_max
            ));
        }
        if !(self.norm_epsilon > 0.0) {
            return bad(format!("norm_epsilon must be > 0, got {}", self.norm_epsilon));
        }
        if let Some(c) = self.pinned {
            if !c.is_finite() {
                return bad("pinned difficulty must be finite".into());
            }
        }
        Ok(())
    }

    fn clip(&self, d: f64) -> f64 {
        d.clamp(self.d_min, self.d_max)
    }
}

/// Running gradient-norm and loss statistics.
///
/// μ is an EMA of the signal; σ is an EMA of the absolute deviation from the
/// freshly updated μ. The first observation seeds μ with the value and σ
/// with 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTracker {
    pub config: DifficultyConfig,
    pub mu_g: f64,
    pub sigma_g: f64,
    pub mu_l: f64,
    pub sigma_l: f64,
    pub batches_seen: u64,
}

impl DifficultyTracker {
    pub fn new(config: DifficultyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            mu_g: 0.0,
            sigma_g: 0.0,
            mu_l: 0.0,
            sigma_l: 0.0,
            batches_seen: 0,
        })
    }

    pub fn in_warmup(&self) -> bool {
        self.batches_seen < self.config.warmup_batches
    }

    /// Folds one batch into the statistics and returns its clipped
    /// difficulty.
    pub fn observe_batch(&mut self, grad_norm: f64, batch_loss: f64) -> Result<f64> {
        if !(grad_norm >= 0.0) || !grad_norm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "gradient norm must be finite and >= 0, got {grad_norm}"
            )));
        }
        if !batch_loss.is_finite() {
            return Err(Error::InvalidArgument(format!("batch loss must be finite, got {batch_loss}")));
        }
        let warm = self.in_warmup();
        if self.batches_seen == 0 {
            self.mu_g = grad_norm;
            self.mu_l = batch_loss;
            self.sigma_g = 0.0;
            self.sigma_l = 0.0;
        } else {
            let beta = self.config.ema_beta;
            (self.mu_g, self.sigma_g) = ema_update(self.mu_g, self.sigma_g, grad_norm, beta);
            (self.mu_l, self.sigma_l) = ema_update(self.mu_l, self.sigma_l, batch_loss, beta);
        }
        self.batches_seen += 1;

        if let Some(c) = self.config.pinned {
            return Ok(self.config.clip(c));
        }
        if warm {
            return Ok(self.config.clip(0.5));
        }
        Ok(self.score(grad_norm, batch_loss))
    }

    /// Difficulty of `(G, L)` against the current statistics, without
    /// updating them.
    pub fn score(&self, grad_norm: f64, batch_loss: f64) -> f64 {
        let c = &self.config;
        let g = rescale(zscore(grad_norm, self.mu_g, self.sigma_g, c.norm_epsilon), c.clip_k);
        let l = rescale(zscore(batch_loss, self.mu_l, self.sigma_l, c.norm_epsilon), c.clip_k);
        let raw = c.alpha_mix * g + (1.0 - c.alpha_mix) * l;
        c.clip(raw)
    }

    /// `η_t = η₀ · D_t`.
    pub fn scaled_learning_rate(&self, base_lr: f64, difficulty: f64) -> f64 {
        scaled_learning_rate(base_lr, difficulty)
    }
}

// μ is advanced as μ + (1 − β)(x − μ) so that x == μ leaves it bit-identical.
fn ema_update(mu: f64, sigma: f64, x: f64, beta: f64) -> (f64, f64) {
    let mu = mu + (1.0 - beta) * (x - mu);
    let sigma = beta * sigma + (1.0 - beta) * (x - mu).abs();
    (mu, sigma)
}

fn zscore(x: f64, mu: f64, sigma: f64, eps: f64) -> f64 {
    (x - mu) / (sigma + eps)
}

fn rescale(z: f64, k: f64) -> f64 {
    (z.clamp(-k, k) + k) / (2.0 * k)
}

pub fn scaled_learning_rate(base_lr: f64, difficulty: f64) -> f64 {
    base_lr * difficulty
}

/// One DBS-Adam update; returns the learning rate η_t that was applied.
pub fn dbs_adam_step(
    state: &mut OptimizerState,
    config: &OptimizerConfig,
    tracker: &mut DifficultyTracker,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    batch_loss: f64,
) -> Result<f64> {
    check_inputs(params, grads)?;
    let g_norm = gradient_norm(grads, tracker.config.grad_norm_mode);
    let difficulty = tracker.observe_batch(g_norm, batch_loss)?;
    let lr = scaled_learning_rate(config.base_lr, difficulty);
    adam_step(state, config, params, grads, Some(lr))?;
    Ok(lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Amsgrad,
    Adamw,
    Adabound,
    DbsAdam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Adam,
        OptimizerKind::Amsgrad,
        OptimizerKind::Adamw,
        OptimizerKind::Adabound,
        OptimizerKind::DbsAdam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Amsgrad => "amsgrad",
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Adabound => "adabound",
            OptimizerKind::DbsAdam => "dbs_adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown optimizer '{s}'")))
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A configured optimizer bundled with its state, for training loops that
/// treat the five variants uniformly.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    config: OptimizerConfig,
    state: OptimizerState,
    tracker: Option<DifficultyTracker>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, config: OptimizerConfig, difficulty: DifficultyConfig) -> Result<Self> {
        config.validate()?;
        let tracker = match kind {
            OptimizerKind::DbsAdam => Some(DifficultyTracker::new(difficulty)?),
            _ => None,
        };
        Ok(Self {
            kind,
            config,
            state: OptimizerState::new(),
            tracker,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn tracker(&self) -> Option<&DifficultyTracker> {
        self.tracker.as_ref()
    }

    /// Applies one update and returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], batch_loss: f64) -> Result<f64> {
        let (state, config) = (&mut self.state, &self.config);
        match self.kind {
            OptimizerKind::Adam => adam_step(state, config, params, grads, None)?,
            OptimizerKind::Amsgrad => amsgrad_step(state, config, params, grads, None)?,
            OptimizerKind::Adamw => adamw_step(state, config, params, grads, None)?,
            OptimizerKind::Adabound => adabound_step(state, config, params, grads, None)?,
            OptimizerKind::DbsAdam => {
                let tracker = self.tracker.as_mut().expect("dbs_adam always owns a tracker");
                return dbs_adam_step(state, config, tracker, params, grads, batch_loss);
            }
        }
        Ok(config.base_lr)
    }
}
