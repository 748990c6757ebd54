use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::std_floor;
use crate::series::Series;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    /// Largest number of series combined (`k ~ U{1, k_max}`).
    pub k_max: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Symmetric Dirichlet concentration for the mixing weights.
    pub weight_concentration: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            k_max: 4,
            len_min: 128,
            len_max: 4096,
            weight_concentration: 1.5,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 || self.len_min == 0 || self.len_min > self.len_max || !(self.weight_concentration > 0.0) {
            return Err(Error::Config(format!("invalid mixup config {self:?}")));
        }
        Ok(())
    }
}

/// A mixup output together with how it was formed.
#[derive(Clone, Debug)]
pub struct MixupDraw {
    pub series: Series,
    pub weights: Vec<f64>,
    /// `(pool index, window start)` per component.
    pub sources: Vec<(usize, usize)>,
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub fn dirichlet_weights(k: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        w.fill(1.0 / k as f64);
    }
    w
}

fn standardized(window: &Series) -> Vec<f64> {
    let obs: Vec<f64> = (0..window.len()).filter_map(|i| window.get(i)).collect();
    if obs.is_empty() {
        return window.values.clone();
    }
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / obs.len() as f64;
    let std = var.sqrt().max(std_floor(mean));
    window.values.iter().map(|v| (v - mean) / std).collect()
}

/// Convex combination of equal-length windows. A step is missing when any
/// component is missing there.
pub fn combine(windows: &[Series], weights: &[f64], standardize: bool) -> Result<Series> {
    let first = windows.first().ok_or(Error::EmptyInput("no windows to combine"))?;
    let len = first.len();
    if weights.len() != windows.len() || windows.iter().any(|w| w.len() != len) {
        return Err(Error::dim("combine", &[windows.len(), len], &[weights.len()]));
    }
    let mut values = vec![0.0; len];
    let mut missing = vec![false; len];
    for (w, &weight) in windows.iter().zip(weights) {
        let vals = if standardize { standardized(w) } else { w.values.clone() };
        for i in 0..len {
            if w.is_observed(i) {
                values[i] += weight * vals[i];
            } else {
                missing[i] = true;
            }
        }
    }
    for (v, &m) in values.iter_mut().zip(&missing) {
        if m {
            *v = f64::NAN;
        }
    }
    let mut out = Series::new(first.id.clone(), first.freq.clone(), values);
    out.season_length = first.season_length;
    Ok(out)
}

/// TSMixup draw; a pure function of `(pool, cfg, seed)`.
pub fn tsmixup(pool: &[Series], cfg: &MixupConfig, seed: u64) -> Result<Series> {
    Ok(tsmixup_detailed(pool, cfg, seed)?.series)
}

pub fn tsmixup_detailed(pool: &[Series], cfg: &MixupConfig, seed: u64) -> Result<MixupDraw> {
    cfg.validate()?;
    let longest = pool
        .iter()
        .map(Series::len)
        .filter(|&l| l >= cfg.len_min)
        .max()
        .ok_or(Error::InsufficientPool { needed: cfg.len_min })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=cfg.k_max);
    let len = rng.random_range(cfg.len_min..=cfg.len_max.min(longest));
    let candidates: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].len() >= len).collect();
    let mut sources = Vec::with_capacity(k);
    let mut windows = Vec::with_capacity(k);
    for _ in 0..k {
        let idx = candidates[rng.random_range(0..candidates.len())];
        let start = rng.random_range(0..=pool[idx].len() - len);
        windows.push(pool[idx].slice(start..start + len));
        sources.push((idx, start));
    }
    let weights = dirichlet_weights(k, cfg.weight_concentration, &mut rng);
    let mut series = combine(&windows, &weights, true)?;
    series.id = format!("mixup-{seed}");
    Ok(MixupDraw {
        series,
        weights,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> Vec<Series> {
        (0..5)
            .map(|i| {
                let vals = (0..300).map(|t| ((t * (i + 1)) as f64 * 0.1).sin() * (i + 1) as f64 + i as f64).collect();
                Series::new(format!("p{i}"), "D", vals)
            })
            .collect()
    }

    fn small_cfg() -> MixupConfig {
        MixupConfig {
            len_min: 32,
            len_max: 256,
            ..MixupConfig::default()
        }
    }

    #[test]
    fn single_component_is_a_standardized_window() {
        let cfg = MixupConfig {
            k_max: 1,
            ..small_cfg()
        };
        let draw = tsmixup_detailed(&pool(), &cfg, 3).unwrap();
        assert_eq!(draw.weights, vec![1.0]);
        let (idx, start) = draw.sources[0];
        let window = pool()[idx].slice(start..start + draw.series.len());
        let expected = standardized(&window);
        for (a, b) in draw.series.values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean = draw.series.values.iter().sum::<f64>() / draw.series.len() as f64;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn hand_convex_combination() {
        let zeros = Series::new("a", "H", vec![0.0; 8]);
        let ones = Series::new("b", "H", vec![1.0; 8]);
        let out = combine(&[zeros, ones], &[0.25, 0.75], false).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn weights_lie_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..1000 {
            let k = 1 + i % 4;
            let w = dirichlet_weights(k, 1.5, &mut rng);
            assert_eq!(w.len(), k);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn output_length_within_bounds_and_deterministic() {
        let cfg = small_cfg();
        for seed in 0..50 {
            let a = tsmixup(&pool(), &cfg, seed).unwrap();
            assert!((cfg.len_min..=cfg.len_max).contains(&a.len()));
            let b = tsmixup(&pool(), &cfg, seed).unwrap();
            assert_eq!(a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn short_pool_is_rejected() {
        let cfg = MixupConfig {
            len_min: 400,
            len_max: 500,
            ..MixupConfig::default()
        };
        assert!(matches!(tsmixup(&pool(), &cfg, 0), Err(Error::InsufficientPool { needed: 400 })));
        assert!(matches!(tsmixup(&[], &cfg, 0), Err(Error::InsufficientPool { .. })));
    }

    #[test]
    fn missing_propagates() {
        let mut a = Series::new("a", "H", vec![1.0; 4]);
        a.missing[2] = true;
        let b = Series::new("b", "H", vec![2.0; 4]);
        let out = combine(&[a, b], &[0.5, 0.5], false).unwrap();
        assert_eq!(out.missing, vec![false, false, true, false]);
    }
}
