use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output head variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// Single affine map `d → n_token·n_q·p`.
    Linear,
    /// `SiLU(h·W₁ + b₁)·W₂ + h·Wₛ + b`.
    ResidualBlock,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub p_in: usize,
    pub p_out: usize,
    pub n_q: usize,
    /// Future patches predicted from every position.
    pub n_token: usize,
    pub quantile_levels: Vec<f32>,
    pub projection_kind: ProjectionKind,
    pub max_context_patches: usize,
    /// Norm → sublayer → residual when `true`; residual → norm otherwise.
    pub pre_norm: bool,
    pub rope_base: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            p_in: 16,
            p_out: 16,
            n_q: 9,
            n_token: 4,
            quantile_levels: default_levels(),
            projection_kind: ProjectionKind::ResidualBlock,
            max_context_patches: 512,
            pre_norm: true,
            rope_base: 10_000.0,
        }
    }
}

/// `{0.1, 0.2, …, 0.9}`.
pub fn default_levels() -> Vec<f32> {
    (1..=9).map(|i| i as f32 / 10.0).collect()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return fail("head dimension must be even for rotary positions".into());
        }
        if self.p_in == 0 || self.p_in != self.p_out {
            return fail(format!("p_in {} and p_out {} must be equal and positive", self.p_in, self.p_out));
        }
        if self.quantile_levels.len() != self.n_q || self.n_q == 0 {
            return fail(format!(
                "{} quantile levels given for n_q = {}",
                self.quantile_levels.len(),
                self.n_q
            ));
        }
        if self.quantile_levels.windows(2).any(|w| w[0] >= w[1]) {
            return fail("quantile levels must be strictly increasing".into());
        }
        if let Some(q) = self.quantile_levels.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(Error::InvalidQuantile(*q as f64));
        }
        if self.n_token == 0 || self.n_layers == 0 || self.d_ff == 0 || self.max_context_patches == 0 {
            return fail("n_token, n_layers, d_ff and max_context_patches must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of one head output row: `n_token · n_q · p_out`.
    pub fn head_width(&self) -> usize {
        self.n_token * self.n_q * self.p_out
    }

    /// Whether patch embedding needs a learned skip projection.
    pub fn has_embed_skip(&self) -> bool {
        2 * self.p_in != self.d_model
    }

    /// Index of the 0.5 level, or of the level nearest to it.
    pub fn median_index(&self) -> usize {
        median_index(&self.quantile_levels)
    }

    /// Parameter count derived from the hyperparameters alone.
    pub fn parameter_count(&self) -> usize {
        let (d, f, x) = (self.d_model, self.d_ff, 2 * self.p_in);
        let out = self.head_width();
        let embed = x * d + d + if self.has_embed_skip() { x * d } else { 0 };
        let layer = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d;
        let head = match self.projection_kind {
            ProjectionKind::Linear => d * out + out,
            ProjectionKind::ResidualBlock => d * d + d + 2 * d * out + out,
        };
        embed + self.n_layers * layer + 2 * d + head
    }
}

pub fn median_index(levels: &[f32]) -> usize {
    levels
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.quantile_levels.len(), 9);
        assert_eq!(cfg.median_index(), 4);
        assert_eq!(cfg.head_width(), 4 * 9 * 16);
    }

    #[test]
    fn rejects_bad_levels_and_shapes() {
        let mut cfg = ModelConfig::default();
        cfg.quantile_levels.swap(0, 1);
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            d_model: 60,
            n_heads: 8,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            p_out: 8,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ModelConfig {
            projection_kind: ProjectionKind::Linear,
            ..ModelConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"linear\""));
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
