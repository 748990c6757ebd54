use crate::numerics::Tensor;

use super::config::ModelConfig;

#[derive(Clone, Debug, Default)]
struct LayerCache {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Per-layer attention keys (already rotated) and values for a prefix of
/// tokens. Rows are tokens and columns are `d_model`, with head `h`
/// occupying columns `h·head_dim..(h+1)·head_dim`.
#[derive(Clone, Debug)]
pub struct KVCache {
    layers: Vec<LayerCache>,
    d_model: usize,
    len: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: vec![LayerCache::default(); config.n_layers],
            d_model: config.d_model,
            len: 0,
        }
    }

    /// Number of cached tokens.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.keys.clear();
            l.values.clear();
        }
        self.len = 0;
    }

    /// Cached keys and values of `layer` as `len × d_model` tensors.
    pub fn layer(&self, layer: usize) -> (Tensor, Tensor) {
        let l = &self.layers[layer];
        let rows = l.keys.len() / self.d_model;
        (
            Tensor::new(vec![rows, self.d_model], l.keys.clone()).expect("cache shape"),
            Tensor::new(vec![rows, self.d_model], l.values.clone()).expect("cache shape"),
        )
    }

    pub(crate) fn append(&mut self, layer: usize, keys: &[f32], values: &[f32]) {
        let l = &mut self.layers[layer];
        l.keys.extend_from_slice(keys);
        l.values.extend_from_slice(values);
    }

    /// Marks `n` appended tokens as committed across all layers.
    pub(crate) fn commit(&mut self, n: usize) {
        self.len += n;
        debug_assert!(self
            .layers
            .iter()
            .all(|l| l.keys.len() == self.len * self.d_model));
    }
}
