//! Decoder-only patch transformer with a multi-token quantile head.

mod cache;
pub mod checkpoint;
mod config;
mod norm;

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use cache::KVCache;
pub use config::{default_levels, median_index, ModelConfig, ProjectionKind};
pub use norm::{compute_norm_stats, patchify, prefix_len, std_floor, NormStats, Patches, SOURCE_FRACTION};

use crate::error::{Error, Result};
use crate::numerics::{RopeLayout, Tape, Tensor, Var, LAYERNORM_EPS};

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Every weight array of a model built from `cfg`, in canonical order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, x) = (cfg.d_model, cfg.d_ff, 2 * cfg.p_in);
    let out = cfg.head_width();
    let fan_in = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    // Residual-branch outputs start small so early training stays near identity.
    let resid = |n: usize| Init::Normal(1.0 / (n as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt());
    let mut specs = vec![
        ("embed.w".to_string(), vec![x, d], fan_in(x)),
        ("embed.b".to_string(), vec![d], Init::Zeros),
    ];
    if cfg.has_embed_skip() {
        specs.push(("embed.skip".to_string(), vec![x, d], fan_in(x)));
    }
    for l in 0..cfg.n_layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        specs.extend([
            (n("ln1.gamma"), vec![d], Init::Ones),
            (n("ln1.beta"), vec![d], Init::Zeros),
            (n("attn.wq"), vec![d, d], fan_in(d)),
            (n("attn.wk"), vec![d, d], fan_in(d)),
            (n("attn.wv"), vec![d, d], fan_in(d)),
            (n("attn.wo"), vec![d, d], resid(d)),
            (n("ln2.gamma"), vec![d], Init::Ones),
            (n("ln2.beta"), vec![d], Init::Zeros),
            (n("ffn.w1"), vec![d, f], fan_in(d)),
            (n("ffn.b1"), vec![f], Init::Zeros),
            (n("ffn.w2"), vec![f, d], resid(f)),
            (n("ffn.b2"), vec![d], Init::Zeros),
        ]);
    }
    specs.push(("final_norm.gamma".to_string(), vec![d], Init::Ones));
    specs.push(("final_norm.beta".to_string(), vec![d], Init::Zeros));
    let head_init = Init::Normal(0.1 / (d as f64).sqrt());
    match cfg.projection_kind {
        ProjectionKind::Linear => {
            specs.push(("head.w".to_string(), vec![d, out], head_init));
        }
        ProjectionKind::ResidualBlock => {
            specs.push(("head.hidden.w".to_string(), vec![d, d], fan_in(d)));
            specs.push(("head.hidden.b".to_string(), vec![d], Init::Zeros));
            specs.push(("head.out.w".to_string(), vec![d, out], head_init));
            specs.push(("head.skip.w".to_string(), vec![d, out], head_init));
        }
    }
    specs.push(("head.b".to_string(), vec![out], Init::Zeros));
    specs
}

/// Full weight set of the forecaster.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl Model {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut named = Vec::new();
        for (name, shape, init) in param_specs(&config) {
            let numel = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..numel).map(|_| dist.sample(&mut rng) as f32).collect()
                }
            };
            named.push((name, Tensor::new(shape, data)?));
        }
        Self::from_named(config, named)
    }

    /// Assembles a model from named tensors, which must match the layout
    /// implied by `config` exactly.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut by_name: HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, _) in specs {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(Arc::new(t));
        }
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| self.params[i].as_ref())
    }

    /// Replaces a tensor in place; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if value.shape() != self.params[i].shape() {
            return Err(Error::dim("set_param", self.params[i].shape(), value.shape()));
        }
        self.params[i] = Arc::new(value);
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Records every weight on `tape`, as trainable leaves or as frozen
    /// constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t, '_> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(Arc::clone(p))
                } else {
                    tape.frozen(Arc::clone(p))
                }
            })
            .collect();
        Bound { model: self, vars }
    }

    /// Head output for one token sequence `T × 2·p_in`, without gradients.
    /// With a cache, `x_hat` holds only the new tokens and the cache grows.
    pub fn predict(&self, x_hat: &Tensor, cache: Option<&mut KVCache>) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let z = b.embed_patch(tape.constant(x_hat.clone()))?;
        let h = b.forward(z, 1, cache)?;
        Ok((*b.project_head(h)?.value()).clone())
    }
}

/// Model weights recorded on a tape.
pub struct Bound<'t, 'm> {
    model: &'m Model,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t, '_> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var<'t> {
        self.vars[self.model.index[name]]
    }

    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// `SiLU(x̂·W + b) + skip(x̂)` for every row of `x_hat` (`N × 2·p_in`).
    /// The skip path is the identity when `2·p_in == d_model` and a learned
    /// projection otherwise.
    pub fn embed_patch(&self, x_hat: Var<'t>) -> Result<Var<'t>> {
        let cfg = self.config();
        let shape = x_hat.shape();
        if shape.len() != 2 || shape[1] != 2 * cfg.p_in {
            return Err(Error::dim("embed_patch", &shape, &[2 * cfg.p_in]));
        }
        let act = x_hat.matmul(self.p("embed.w"))?.add(self.p("embed.b"))?.silu();
        let skip = if cfg.has_embed_skip() {
            x_hat.matmul(self.p("embed.skip"))?
        } else {
            x_hat
        };
        act.add(skip)
    }

    /// Runs the transformer stack over `batch` sequences stacked row-wise in
    /// `tokens` (`(batch·T) × d_model`).
    ///
    /// With a cache (batch 1 only), `tokens` are the suffix following the
    /// cached prefix; their keys and values are appended to the cache.
    pub fn forward(&self, tokens: Var<'t>, batch: usize, mut cache: Option<&mut KVCache>) -> Result<Var<'t>> {
        let cfg = self.config();
        let shape = tokens.shape();
        if shape.len() != 2 || shape[1] != cfg.d_model || batch == 0 || !shape[0].is_multiple_of(batch) {
            return Err(Error::dim("forward", &shape, &[batch, cfg.d_model]));
        }
        let len = shape[0] / batch;
        let offset = cache.as_ref().map_or(0, |c| c.len());
        if cache.is_some() && batch != 1 {
            return Err(Error::Config("a KV cache serves a single sequence".into()));
        }
        if offset + len > cfg.max_context_patches {
            return Err(Error::ContextLength {
                needed: offset + len,
                max: cfg.max_context_patches,
            });
        }
        let layout = RopeLayout { batch, len, offset };
        let mut x = tokens;
        for l in 0..cfg.n_layers {
            x = self.layer(l, x, layout, cache.as_deref_mut())?;
        }
        if let Some(c) = cache {
            c.commit(len);
        }
        x.layernorm(self.p("final_norm.gamma"), self.p("final_norm.beta"), LAYERNORM_EPS)
    }

    fn layer(&self, l: usize, x: Var<'t>, layout: RopeLayout, cache: Option<&mut KVCache>) -> Result<Var<'t>> {
        let cfg = self.config();
        let tape = x.tape();
        let w = |s: &str| self.p(&format!("layers.{l}.{s}"));
        let norm = |v: Var<'t>, which: &str| {
            v.layernorm(w(&format!("{which}.gamma")), w(&format!("{which}.beta")), LAYERNORM_EPS)
        };

        let attn_in = if cfg.pre_norm { norm(x, "ln1")? } else { x };
        let q = attn_in.matmul(w("attn.wq"))?.rope(layout, cfg.n_heads, cfg.rope_base)?;
        let k = attn_in.matmul(w("attn.wk"))?.rope(layout, cfg.n_heads, cfg.rope_base)?;
        let v = attn_in.matmul(w("attn.wv"))?;
        let (k_all, v_all) = match cache {
            Some(c) => {
                let (ck, cv) = c.layer(l);
                c.append(l, k.value().data(), v.value().data());
                (tape.constant(ck).concat_rows(k)?, tape.constant(cv).concat_rows(v)?)
            }
            None => (k, v),
        };
        let attn = q
            .causal_attention(k_all, v_all, layout.batch, cfg.n_heads, layout.offset)?
            .matmul(w("attn.wo"))?;
        let mut x = x.add(attn)?;
        if !cfg.pre_norm {
            x = norm(x, "ln1")?;
        }

        let ffn_in = if cfg.pre_norm { norm(x, "ln2")? } else { x };
        let ffn = ffn_in
            .matmul(w("ffn.w1"))?
            .add(w("ffn.b1"))?
            .silu()
            .matmul(w("ffn.w2"))?
            .add(w("ffn.b2"))?;
        x = x.add(ffn)?;
        if !cfg.pre_norm {
            x = norm(x, "ln2")?;
        }
        Ok(x)
    }

    /// Maps hidden states `N × d` to `N × (n_token·n_q·p_out)`, laid out as
    /// `[patch k][level q][step j]` within each row.
    pub fn project_head(&self, h: Var<'t>) -> Result<Var<'t>> {
        match self.config().projection_kind {
            ProjectionKind::Linear => h.matmul(self.p("head.w"))?.add(self.p("head.b")),
            ProjectionKind::ResidualBlock => {
                let hidden = h.matmul(self.p("head.hidden.w"))?.add(self.p("head.hidden.b"))?.silu();
                hidden
                    .matmul(self.p("head.out.w"))?
                    .add(h.matmul(self.p("head.skip.w"))?)?
                    .add(self.p("head.b"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            p_in: 4,
            p_out: 4,
            n_token: 2,
            max_context_patches: 64,
            ..ModelConfig::default()
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Enumerates weight arrays by walking the architecture by hand.
    fn enumerated_count(cfg: &ModelConfig) -> usize {
        let (d, f, x, out) = (cfg.d_model, cfg.d_ff, 2 * cfg.p_in, cfg.head_width());
        let mut arrays: Vec<usize> = vec![x * d, d];
        if x != d {
            arrays.push(x * d);
        }
        for _ in 0..cfg.n_layers {
            arrays.extend([d, d]); // ln1
            arrays.extend([d * d; 4]); // q k v o
            arrays.extend([d, d]); // ln2
            arrays.extend([d * f, f, f * d, d]);
        }
        arrays.extend([d, d]);
        match cfg.projection_kind {
            ProjectionKind::Linear => arrays.extend([d * out, out]),
            ProjectionKind::ResidualBlock => arrays.extend([d * d, d, d * out, d * out, out]),
        }
        arrays.iter().sum()
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        for kind in [ProjectionKind::Linear, ProjectionKind::ResidualBlock] {
            for (d, p) in [(16, 4), (16, 8), (64, 16)] {
                let cfg = ModelConfig {
                    d_model: d,
                    p_in: p,
                    p_out: p,
                    n_heads: 4,
                    projection_kind: kind,
                    ..ModelConfig::default()
                };
                let model = Model::init(cfg.clone(), 0).unwrap();
                assert_eq!(model.parameter_count(), cfg.parameter_count());
                assert_eq!(cfg.parameter_count(), enumerated_count(&cfg));
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(small_config(), 9).unwrap();
        let b = Model::init(small_config(), 9).unwrap();
        let c = Model::init(small_config(), 10).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x == y));
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| x != y));
    }

    #[test]
    fn embed_residual_path_only() {
        // 2·p_in == d makes the skip the identity.
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            p_in: 4,
            p_out: 4,
            ..small_config()
        };
        let mut model = Model::init(cfg, 0).unwrap();
        model.set_param("embed.w", Tensor::zeros(vec![8, 8])).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape, false);
        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        let z = b.embed_patch(tape.constant(Tensor::matrix(1, 8, e1.clone()).unwrap())).unwrap();
        assert_eq!(z.value().data(), e1.as_slice());
    }

    #[test]
    fn embed_with_unit_bias() {
        let cfg = small_config();
        let mut model = Model::init(cfg.clone(), 0).unwrap();
        model.set_param("embed.w", Tensor::zeros(vec![8, 16])).unwrap();
        model.set_param("embed.b", Tensor::full(vec![16], 1.0)).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape, false);
        let x = tape.constant(Tensor::matrix(1, 8, (0..8).map(|i| i as f32 / 8.0).collect()).unwrap());
        let z = b.embed_patch(x).unwrap().value();
        let skip = x.matmul(tape.constant(model.param("embed.skip").unwrap().clone())).unwrap().value();
        let silu1 = 1.0 / (1.0 + (-1.0f32).exp());
        for (zi, si) in z.data().iter().zip(skip.data()) {
            assert!((zi - (silu1 + si)).abs() < 1e-6);
        }
        assert!(matches!(
            b.embed_patch(tape.constant(Tensor::zeros(vec![1, 7]))),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn embed_gradient_matches_finite_differences() {
        let cfg = small_config();
        let model = Model::init(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tokens(&mut rng, 3, 8);
        let w = model.param("embed.w").unwrap().clone();
        let b = model.param("embed.b").unwrap().clone();
        let s = model.param("embed.skip").unwrap().clone();
        check_gradients(&[x, w, b, s], |_, v| {
            v[0].matmul(v[1])?.add(v[2])?.silu().add(v[0].matmul(v[3])?)
        })
        .assert_within(1e-3);
    }

    #[test]
    fn outputs_are_causal() {
        let cfg = small_config();
        let model = Model::init(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tokens(&mut rng, 6, 8);
        let base = model.predict(&x, None).unwrap();
        for j in 0..6 {
            let mut y = x.clone();
            y.data_mut()[j * 8] += 1.5;
            let out = model.predict(&y, None).unwrap();
            let w = out.cols();
            for t in 0..6 {
                let same = out.data()[t * w..(t + 1) * w] == base.data()[t * w..(t + 1) * w];
                assert_eq!(same, t < j, "perturbing token {j} vs output {t}");
            }
        }
    }

    #[test]
    fn cached_suffix_matches_full_forward() {
        for n_layers in 1..=3 {
            let cfg = ModelConfig {
                n_layers,
                ..small_config()
            };
            let model = Model::init(cfg.clone(), n_layers as u64).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = random_tokens(&mut rng, 32, 8);
            let full = model.predict(&x, None).unwrap();
            let mut cache = KVCache::new(&cfg);
            let mut rows = Vec::new();
            let mut start = 0;
            for chunk in [20, 1, 4, 7] {
                let part = Tensor::new(vec![chunk, 8], x.data()[start * 8..(start + chunk) * 8].to_vec()).unwrap();
                rows.extend_from_slice(model.predict(&part, Some(&mut cache)).unwrap().data());
                start += chunk;
            }
            assert_eq!(cache.len(), 32);
            let diff = full.data().iter().zip(&rows).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff <= 1e-5, "layers {n_layers}: {diff}");
        }
    }

    #[test]
    fn context_overflow_is_an_error() {
        let cfg = ModelConfig {
            max_context_patches: 4,
            ..small_config()
        };
        let model = Model::init(cfg.clone(), 0).unwrap();
        assert!(matches!(
            model.predict(&Tensor::zeros(vec![5, 8]), None),
            Err(Error::ContextLength { needed: 5, max: 4 })
        ));
        let mut cache = KVCache::new(&cfg);
        model.predict(&Tensor::zeros(vec![3, 8]), Some(&mut cache)).unwrap();
        assert!(matches!(
            model.predict(&Tensor::zeros(vec![2, 8]), Some(&mut cache)),
            Err(Error::ContextLength { needed: 5, max: 4 })
        ));
    }

    #[test]
    fn value_path_single_token_trace() {
        // One token, one layer: only Wv and Wo are non-zero, so the output is
        // final_norm(x + ln1(x)·Wv·Wo).
        let cfg = ModelConfig {
            n_layers: 1,
            ..small_config()
        };
        let d = cfg.d_model;
        let mut model = Model::init(cfg.clone(), 0).unwrap();
        let eye: Vec<f32> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        for name in ["attn.wq", "attn.wk"] {
            model.set_param(&format!("layers.0.{name}"), Tensor::zeros(vec![d, d])).unwrap();
        }
        for name in ["attn.wv", "attn.wo"] {
            model.set_param(&format!("layers.0.{name}"), Tensor::new(vec![d, d], eye.clone()).unwrap()).unwrap();
        }
        model.set_param("layers.0.ffn.w1", Tensor::zeros(vec![d, cfg.d_ff])).unwrap();
        model.set_param("layers.0.ffn.w2", Tensor::zeros(vec![cfg.d_ff, d])).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tokens(&mut rng, 1, d);
        let tape = Tape::new();
        let out = model.bind(&tape, false).forward(tape.constant(x.clone()), 1, None).unwrap().value();

        let ln = |v: &[f32]| -> Vec<f32> {
            let m = v.iter().sum::<f32>() / v.len() as f32;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f32>() / v.len() as f32;
            v.iter().map(|a| (a - m) / (var + LAYERNORM_EPS).sqrt()).collect()
        };
        let h: Vec<f32> = x.data().iter().zip(ln(x.data())).map(|(a, b)| a + b).collect();
        let expected = ln(&h);
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn head_shapes_and_degenerate_residual_block() {
        let lin_cfg = ModelConfig {
            projection_kind: ProjectionKind::Linear,
            ..small_config()
        };
        let res_cfg = ModelConfig {
            projection_kind: ProjectionKind::ResidualBlock,
            ..small_config()
        };
        let mut lin = Model::init(lin_cfg.clone(), 5).unwrap();
        let mut res = Model::init(res_cfg.clone(), 6).unwrap();
        let (d, out) = (lin_cfg.d_model, lin_cfg.head_width());
        res.set_param("head.out.w", Tensor::zeros(vec![d, out])).unwrap();
        let skip = res.param("head.skip.w").unwrap().clone();
        let bias = res.param("head.b").unwrap().clone();
        lin.set_param("head.w", skip).unwrap();
        lin.set_param("head.b", bias).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random_tokens(&mut rng, 3, d);
        let tape = Tape::new();
        let a = lin.bind(&tape, false).project_head(tape.constant(h.clone())).unwrap().value();
        let b = res.bind(&tape, false).project_head(tape.constant(h)).unwrap().value();
        assert_eq!(a.numel(), 3 * lin_cfg.n_token * lin_cfg.n_q * lin_cfg.p_out);
        assert!(a.max_abs_diff(&b) < 1e-6);

        lin.set_param("head.w", Tensor::zeros(vec![d, out])).unwrap();
        lin.set_param("head.b", Tensor::zeros(vec![out])).unwrap();
        let z = lin.bind(&tape, false).project_head(tape.constant(Tensor::full(vec![2, d], 3.0))).unwrap().value();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn post_norm_variant_runs_and_differs() {
        let pre = Model::init(small_config(), 2).unwrap();
        let post_cfg = ModelConfig {
            pre_norm: false,
            ..small_config()
        };
        let post = Model::from_named(
            post_cfg,
            pre.names().iter().cloned().zip(pre.params().iter().map(|p| (**p).clone())).collect(),
        )
        .unwrap();
        let x = Tensor::full(vec![3, 8], 0.5);
        let a = pre.predict(&x, None).unwrap();
        let b = post.predict(&x, None).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }
}
