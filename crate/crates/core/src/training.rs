//! Optimization loop: AdamW with decoupled weight decay, linear warmup into
//! cosine annealing, global-norm clipping and periodic checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{make_sample, sample_window, zscore_filter, TrainSample, ZSCORE_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::{checkpoint, Model, ModelConfig, ProjectionKind};
use crate::numerics::{Tape, Tensor};
use crate::series::Series;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-3,
            weight_decay: 1e-1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 32,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    /// Schedule with warmup fixed at a tenth of `total_steps`.
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            total_steps,
            warmup_steps: (total_steps / 10).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0 < self.warmup_steps
            && self.warmup_steps < self.total_steps
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.lr_peak > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// Learning rate at `step`: linear ramp to `lr_peak` over the warmup, then
/// half-cosine down to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &OptimConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Schedule {
            step,
            total: cfg.total_steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_peak * step as f64 / cfg.warmup_steps as f64);
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    Ok(cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW moments, mirroring the parameter list of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far.
    pub step: usize,
}

impl OptimState {
    pub fn new(model: &Model) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with learning rate `lr_at(step)`. `step` counts from 1
/// and drives bias correction; weight decay is applied to the parameters
/// before the moment-based step.
pub fn adamw_step(model: &mut Model, grads: &[Tensor], state: &mut OptimState, cfg: &OptimConfig, step: usize) -> Result<()> {
    if step == 0 {
        return Err(Error::Schedule {
            step,
            total: cfg.total_steps,
        });
    }
    let lr = lr_at(step, cfg)?;
    if grads.len() != model.params().len() {
        return Err(Error::dim("adamw_step", &[grads.len()], &[model.params().len()]));
    }
    for ((name, p), g) in model.names().iter().zip(model.params()).zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::dim("adamw_step", g.shape(), p.shape()));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                what: "gradient",
                param: name.clone(),
            });
        }
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = Arc::make_mut(p);
        for (j, (theta, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g as f64;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *theta = (*theta as f64 * decay - lr * update) as f32;
        }
    }
    state.step = step;
    Ok(())
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Pinball loss over the configured quantile levels.
    Quantile,
    /// Pinball loss at the single level 0.5, i.e. half the absolute error.
    Median,
}

/// Ablation axes that change how a model is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFlags {
    pub mask_rate: f64,
    /// Predict `n_token` future patches per position; one patch when off.
    pub multi_token: bool,
    pub projection: ProjectionKind,
    pub loss: LossKind,
}

impl Default for TrainFlags {
    fn default() -> Self {
        Self {
            mask_rate: 0.5,
            multi_token: true,
            projection: ProjectionKind::ResidualBlock,
            loss: LossKind::Quantile,
        }
    }
}

impl TrainFlags {
    /// Architecture actually trained under these flags.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.projection_kind = self.projection;
        if !self.multi_token {
            cfg.n_token = 1;
        }
        if self.loss == LossKind::Median {
            cfg.quantile_levels = vec![0.5];
            cfg.n_q = 1;
        }
        cfg
    }
}

/// Rows v2 through v5 of the design ablation, plus the final configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Quantile loss, linear head, direct median rollout.
    V2,
    /// V2 with autoregressive multi-quantile decoding.
    V3,
    /// V3 with patch masking.
    V4,
    /// V4 with multi-token prediction.
    V5,
    /// V5 with the residual-block head.
    Final,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [Self::V2, Self::V3, Self::V4, Self::V5, Self::Final];

    pub fn flags(self) -> TrainFlags {
        let masked = matches!(self, Self::V4 | Self::V5 | Self::Final);
        TrainFlags {
            mask_rate: if masked { 0.5 } else { 0.0 },
            multi_token: matches!(self, Self::V5 | Self::Final),
            projection: if self == Self::Final {
                ProjectionKind::ResidualBlock
            } else {
                ProjectionKind::Linear
            },
            loss: LossKind::Quantile,
        }
    }

    /// Whether inference uses expand→collapse decoding.
    pub fn autoregressive_quantiles(self) -> bool {
        self != Self::V2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub flags: TrainFlags,
    /// Patches per training window.
    pub ctx_patches: usize,
    pub seed: u64,
    /// Save a checkpoint every this many steps when `ckpt_path` is set.
    pub ckpt_every: Option<usize>,
    pub ckpt_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            flags: TrainFlags::default(),
            ctx_patches: 32,
            seed: 0,
            ckpt_every: None,
            ckpt_path: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,loss,lr,grad_norm";

pub fn write_metrics(out: &mut impl Write, records: &[StepRecord]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.step, r.loss, r.lr, r.grad_norm)?;
    }
    Ok(())
}

pub struct TrainOutput {
    pub model: Model,
    pub metrics: Vec<StepRecord>,
    /// Windows discarded by the z-score filter.
    pub rejected_windows: usize,
}

const MAX_REJECTIONS: usize = 1000;

/// A fixed-shape batch: `B` sequences of `T` tokens with next-patch targets.
pub struct Batch {
    pub batch: usize,
    pub n_patches: usize,
    /// `(B·T) × 2·p_in`.
    pub tokens: Tensor,
    /// `(B·T·n_token) × p`, targets for every (position, future patch).
    pub targets: Vec<f32>,
    pub mask: Vec<f32>,
}

/// Stacks samples into a batch, left-padding short samples with empty
/// tokens. Position `t`, future patch `k` is trained against patch
/// `t + 1 + k`; targets past the end of the window are masked.
pub fn assemble_batch(samples: &[TrainSample], n_patches: usize, n_token: usize, p: usize) -> Result<Batch> {
    let b = samples.len();
    let mut tokens = vec![0.0f32; b * n_patches * 2 * p];
    let mut targets = vec![0.0f32; b * n_patches * n_token * p];
    let mut mask = vec![0.0f32; targets.len()];
    for (s_idx, s) in samples.iter().enumerate() {
        let t = s.n_patches();
        if t > n_patches {
            return Err(Error::ContextLength {
                needed: t,
                max: n_patches,
            });
        }
        let shift = n_patches - t;
        let base = s_idx * n_patches;
        tokens[(base + shift) * 2 * p..(base + n_patches) * 2 * p].copy_from_slice(s.context_patches.data());
        for pos in 0..t {
            for k in 0..n_token {
                let src = pos + 1 + k;
                if src >= t {
                    break;
                }
                let dst = ((base + shift + pos) * n_token + k) * p;
                targets[dst..dst + p].copy_from_slice(&s.target.data()[src * p..(src + 1) * p]);
                mask[dst..dst + p].copy_from_slice(&s.target_mask.data()[src * p..(src + 1) * p]);
            }
        }
    }
    Ok(Batch {
        batch: b,
        n_patches,
        tokens: Tensor::new(vec![b * n_patches, 2 * p], tokens)?,
        targets,
        mask,
    })
}

/// Forward pass and loss on one batch; returns the loss and parameter
/// gradients.
pub fn loss_and_grads(model: &Model, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let cfg = model.config();
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let x = tape.constant(batch.tokens.clone());
    let h = bound.forward(bound.embed_patch(x)?, batch.batch, None)?;
    let out = bound.project_head(h)?;
    let weights = vec![1.0; cfg.n_q];
    let (loss, _) = out.pinball_loss(&batch.targets, &batch.mask, &cfg.quantile_levels, &weights, cfg.p_out)?;
    let value = loss.value().item()? as f64;
    loss.backward()?;
    let grads = bound.vars().iter().map(|v| tape.grad(*v)).collect();
    Ok((value, grads))
}

/// Draws one filtered training sample: uniform series, uniform window.
pub fn draw_sample(corpus: &[Series], cfg: &TrainConfig, model_cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(TrainSample, usize)> {
    let window = cfg.ctx_patches * model_cfg.p_in;
    for rejected in 0..MAX_REJECTIONS {
        let series = &corpus[rng.random_range(0..corpus.len())];
        let w = sample_window(series, window, rng);
        if w.len() <= model_cfg.p_in || !zscore_filter(&w, ZSCORE_THRESHOLD) {
            continue;
        }
        match make_sample(&w, model_cfg, cfg.flags.mask_rate, rng) {
            Ok(s) => return Ok((s, rejected)),
            Err(Error::Normalization { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Config(format!(
        "no usable training window after {MAX_REJECTIONS} draws; corpus is empty after filtering"
    )))
}

/// Trains a fresh model under `cfg`. Deterministic in `(corpus, cfg)`.
pub fn train(corpus: &[Series], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(corpus, cfg, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(corpus: &[Series], cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutput> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    cfg.optim.validate()?;
    if !(0.0..=1.0).contains(&cfg.flags.mask_rate) || cfg.ctx_patches < 2 {
        return Err(Error::Config("mask rate must lie in [0, 1] and windows need ≥ 2 patches".into()));
    }
    let model_cfg = cfg.flags.apply(&cfg.model);
    if cfg.ctx_patches > model_cfg.max_context_patches {
        return Err(Error::ContextLength {
            needed: cfg.ctx_patches,
            max: model_cfg.max_context_patches,
        });
    }
    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    let mut state = OptimState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut metrics = Vec::with_capacity(cfg.optim.total_steps);
    let mut rejected_windows = 0;

    for step in 1..=cfg.optim.total_steps {
        let mut samples = Vec::with_capacity(cfg.optim.batch_size);
        for _ in 0..cfg.optim.batch_size {
            let (s, rejected) = draw_sample(corpus, cfg, &model_cfg, &mut rng)?;
            rejected_windows += rejected;
            samples.push(s);
        }
        let batch = assemble_batch(&samples, cfg.ctx_patches, model_cfg.n_token, model_cfg.p_in)?;
        let (loss, mut grads) = match loss_and_grads(&model, &batch) {
            Ok(r) => r,
            // Every target in the batch fell inside normalization prefixes.
            Err(Error::EmptyLoss) => continue,
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                what: "loss",
                param: format!("step {step}"),
            });
        }
        let grad_norm = match cfg.optim.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        adamw_step(&mut model, &grads, &mut state, &cfg.optim, step)?;
        let record = StepRecord {
            step,
            loss,
            lr: lr_at(step, &cfg.optim)?,
            grad_norm,
        };
        on_step(&record);
        metrics.push(record);
        if let (Some(every), Some(path)) = (cfg.ckpt_every, &cfg.ckpt_path) {
            if every > 0 && step % every == 0 {
                checkpoint::save(&model, path)?;
            }
        }
    }
    if let Some(path) = &cfg.ckpt_path {
        checkpoint::save(&model, path)?;
    }
    Ok(TrainOutput {
        model,
        metrics,
        rejected_windows,
    })
}

/// Path of the metrics log written next to a checkpoint.
pub fn metrics_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".metrics.csv");
    ckpt.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            p_in: 4,
            p_out: 4,
            n_token: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            model: tiny_model_cfg(),
            optim: OptimConfig {
                batch_size: 4,
                ..OptimConfig::with_steps(steps)
            },
            ctx_patches: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = OptimConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(200, &cfg).unwrap(), 1e-3);
        assert!((lr_at(1100, &cfg).unwrap() - 5e-4).abs() < 1e-15);
        assert!(lr_at(2000, &cfg).unwrap().abs() < 1e-18);
        assert!(matches!(lr_at(2001, &cfg), Err(Error::Schedule { step: 2001, total: 2000 })));
    }

    #[test]
    fn schedule_is_continuous_and_nonincreasing_after_warmup() {
        let cfg = OptimConfig::default();
        let below = lr_at(199, &cfg).unwrap();
        let at = lr_at(200, &cfg).unwrap();
        assert!((at - below) <= cfg.lr_peak / cfg.warmup_steps as f64 + 1e-15);
        for s in 200..2000 {
            assert!(lr_at(s + 1, &cfg).unwrap() <= lr_at(s, &cfg).unwrap());
        }
    }

    fn scalar_model(theta: f32) -> Model {
        let mut m = Model::init(tiny_model_cfg(), 0).unwrap();
        let name = m.names()[0].clone();
        let shape = m.param(&name).unwrap().shape().to_vec();
        m.set_param(&name, Tensor::full(shape, theta)).unwrap();
        m
    }

    fn zero_grads(m: &Model) -> Vec<Tensor> {
        m.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect()
    }

    #[test]
    fn zero_grads_without_decay_leave_parameters() {
        let mut m = scalar_model(0.7);
        let before: Vec<Tensor> = m.params().iter().map(|p| (**p).clone()).collect();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut st = OptimState::new(&m);
        let g = zero_grads(&m);
        adamw_step(&mut m, &g, &mut st, &cfg, 5).unwrap();
        for (a, b) in before.iter().zip(m.params()) {
            assert_eq!(a, &**b);
        }
    }

    #[test]
    fn decay_alone_shrinks_by_lr_times_wd() {
        let mut m = scalar_model(0.7);
        let cfg = OptimConfig::default();
        let mut st = OptimState::new(&m);
        let g = zero_grads(&m);
        adamw_step(&mut m, &g, &mut st, &cfg, 200).unwrap();
        let expected = (0.7f32 as f64 * (1.0 - 1e-3 * 0.1)) as f32;
        assert!(m.params()[0].data().iter().all(|&x| x == expected));
    }

    #[test]
    fn one_step_by_hand() {
        // θ = 1, g = 0.5, step 1 with lr 1e-3 at the warmup end.
        // m̂ = g, v̂ = g², so the Adam step is lr·g/(|g|+ε) ≈ lr.
        let cfg = OptimConfig {
            warmup_steps: 1,
            total_steps: 10,
            ..OptimConfig::default()
        };
        let mut m = scalar_model(1.0);
        let mut g = zero_grads(&m);
        g[0] = Tensor::full(g[0].shape().to_vec(), 0.5);
        let mut st = OptimState::new(&m);
        adamw_step(&mut m, &g, &mut st, &cfg, 1).unwrap();
        let expected = 1.0 * (1.0 - 1e-3 * 0.1) - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((m.params()[0].data()[0] as f64 - expected).abs() < 1e-7);
        assert!((st.m[0][0] - 0.05).abs() < 1e-15);
        assert!((st.v[0][0] - 0.02 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        let cfg = OptimConfig {
            warmup_steps: 10,
            total_steps: 100,
            ..OptimConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = scalar_model(0.3);
        let mut st = OptimState::new(&m);
        // Reference: one scalar with f32 storage between steps.
        let (mut theta, mut mm, mut vv) = (0.3f32, 0.0f64, 0.0f64);
        for t in 1..=100usize {
            let g: f32 = rng.random_range(-2.0..2.0);
            let mut grads = zero_grads(&m);
            grads[0] = Tensor::full(grads[0].shape().to_vec(), g);
            adamw_step(&mut m, &grads, &mut st, &cfg, t).unwrap();

            let lr = if t < 10 {
                1e-3 * t as f64 / 10.0
            } else {
                1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * (t - 10) as f64 / 90.0).cos())
            };
            let g = g as f64;
            mm = 0.9 * mm + 0.1 * g;
            vv = 0.98 * vv + 0.02 * g * g;
            let mhat = mm / (1.0 - 0.9f64.powi(t as i32));
            let vhat = vv / (1.0 - 0.98f64.powi(t as i32));
            theta = (theta as f64 * (1.0 - lr * 0.1) - lr * mhat / (vhat.sqrt() + 1e-8)) as f32;
            assert!((m.params()[0].data()[0] - theta).abs() as f64 <= 1e-7, "step {t}");
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut m = scalar_model(1.0);
        let mut g = zero_grads(&m);
        g[3].data_mut()[0] = f32::NAN;
        let mut st = OptimState::new(&m);
        match adamw_step(&mut m, &g, &mut st, &OptimConfig::default(), 1) {
            Err(Error::Divergence { param, .. }) => assert_eq!(param, m.names()[3]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::full(vec![4], 3.0), Tensor::full(vec![1], 4.0)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - (36.0f64 + 16.0).sqrt()).abs() < 1e-6);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn batch_targets_are_next_patches() {
        let cfg = tiny_model_cfg();
        let s = Series::new("a", "H", (0..16).map(|x| x as f64).collect());
        let sample = make_sample(&s, &cfg, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = assemble_batch(std::slice::from_ref(&sample), 6, 2, 4).unwrap();
        // Two empty padding tokens, then four real patches.
        assert!(b.tokens.data()[..16].iter().all(|&x| x == 0.0));
        // Position 2 (first real patch), future patch 0 → real patch 1.
        let row = (2 * 2) * 4;
        assert_eq!(&b.targets[row..row + 4], &sample.target.data()[4..8]);
        // Last real position has no future.
        let last = (5 * 2) * 4;
        assert!(b.mask[last..last + 8].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn flags_give_distinct_variants() {
        let base = ModelConfig::default();
        let cfgs: Vec<(TrainFlags, ModelConfig)> =
            AblationVariant::ALL.iter().map(|v| (v.flags(), v.flags().apply(&base))).collect();
        for i in 0..cfgs.len() {
            for j in i + 1..cfgs.len() {
                let distinct = cfgs[i] != cfgs[j]
                    || AblationVariant::ALL[i].autoregressive_quantiles() != AblationVariant::ALL[j].autoregressive_quantiles();
                assert!(distinct);
            }
        }
        assert_eq!(cfgs[0].1.n_token, 1);
        assert_eq!(cfgs[3].1.n_token, 4);
        let median = TrainFlags {
            loss: LossKind::Median,
            ..TrainFlags::default()
        }
        .apply(&base);
        assert_eq!(median.quantile_levels, vec![0.5]);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let corpus: Vec<Series> = (0..4)
            .map(|i| Series::new(format!("s{i}"), "H", (0..64).map(|t| ((t + i) as f64 * 0.3).sin()).collect()))
            .collect();
        let cfg = tiny_train_cfg(6);
        let a = train(&corpus, &cfg).unwrap();
        let b = train(&corpus, &cfg).unwrap();
        assert_eq!(checkpoint::to_bytes(&a.model).unwrap(), checkpoint::to_bytes(&b.model).unwrap());
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn loss_decreases_on_constant_corpus() {
        let corpus: Vec<Series> = (0..4).map(|i| Series::new(format!("c{i}"), "H", vec![5.0 + i as f64; 64])).collect();
        let mut cfg = tiny_train_cfg(40);
        cfg.flags.mask_rate = 0.0;
        cfg.optim.lr_peak = 1e-2;
        let out = train(&corpus, &cfg).unwrap();
        let first = out.metrics[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        let last = out.metrics[35..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        assert!(last < 0.5 * first, "{first} → {last}");
    }

    #[test]
    fn metrics_csv_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = vec![Series::new("s", "H", (0..64).map(|t| (t as f64 * 0.2).cos()).collect())];
        let mut cfg = tiny_train_cfg(4);
        cfg.ckpt_every = Some(2);
        cfg.ckpt_path = Some(dir.path().join("m.ckpt"));
        let out = train(&corpus, &cfg).unwrap();
        let back = checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
        assert_eq!(checkpoint::to_bytes(&back).unwrap(), checkpoint::to_bytes(&out.model).unwrap());
        let mut buf = Vec::new();
        write_metrics(&mut buf, &out.metrics).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,loss,lr,grad_norm\n1,"));
        assert_eq!(text.lines().count(), 5);
    }
}
