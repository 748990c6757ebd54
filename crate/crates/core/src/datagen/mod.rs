//! Synthetic corpus generation.
//!
//! [`kernelsynth`] draws Gaussian-process paths under randomly composed
//! kernels; [`tsmixup`] forms convex combinations of standardized windows
//! taken from an existing pool.

mod kernels;
mod mixup;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kernels::{cholesky, cholesky_with_jitter, sample_gp, sample_with_factor, Kernel, JITTER_STEPS};
pub use mixup::{combine, dirichlet_weights, tsmixup, tsmixup_detailed, MixupConfig, MixupDraw};

use crate::error::{Error, Result};
use crate::series::Series;

/// Kernels available to [`kernelsynth`] and the maximum number composed.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    pub kernels: Vec<Kernel>,
    /// Upper bound `J` on how many bank kernels one series combines.
    pub max_compose: usize,
}

impl KernelBank {
    /// Trend, local-change and seasonal kernels scaled to `length`.
    pub fn default_for(length: usize) -> Self {
        let n = length as f64;
        let mut kernels = vec![Kernel::Linear { variance: 1.0 }];
        for ls in [n / 32.0, n / 8.0, n / 2.0] {
            kernels.push(Kernel::Rbf {
                lengthscale: ls.max(1.0),
            });
        }
        for period in [24.0, 7.0, 52.0, n / 4.0] {
            kernels.push(Kernel::Periodic {
                period: period.max(2.0),
                lengthscale: 1.0,
            });
        }
        Self {
            kernels,
            max_compose: 5,
        }
    }

    /// Random composition: `j ~ U{1, J}` bank kernels folded with `+` or `×`.
    pub fn compose(&self, rng: &mut impl Rng) -> Result<Kernel> {
        if self.kernels.is_empty() || self.max_compose == 0 {
            return Err(Error::Config("kernel bank is empty".into()));
        }
        let j = rng.random_range(1..=self.max_compose);
        let mut acc = self.kernels[rng.random_range(0..self.kernels.len())].clone();
        for _ in 1..j {
            let next = self.kernels[rng.random_range(0..self.kernels.len())].clone();
            acc = if rng.random_bool(0.5) {
                Kernel::Sum(Box::new(acc), Box::new(next))
            } else {
                Kernel::Product(Box::new(acc), Box::new(next))
            };
        }
        Ok(acc)
    }
}

/// Options for [`kernelsynth`] beyond the bank itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub freq: String,
    pub id_prefix: String,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            freq: "H".into(),
            id_prefix: "kernelsynth".into(),
        }
    }
}

/// One synthetic series; a pure function of `(bank, length, seed)`.
pub fn kernelsynth(bank: &KernelBank, length: usize, seed: u64) -> Result<Series> {
    kernelsynth_with(bank, length, seed, &SynthOptions::default())
}

pub fn kernelsynth_with(bank: &KernelBank, length: usize, seed: u64, opts: &SynthOptions) -> Result<Series> {
    if length < 2 {
        return Err(Error::InsufficientLength { len: length, needed: 2 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = bank.compose(&mut rng)?;
    let values = sample_gp(&kernel, length, &mut rng)?;
    Ok(Series::new(format!("{}-{seed}", opts.id_prefix), opts.freq.clone(), values))
}

/// Per-series seeds derived from a corpus seed.
pub fn derive_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}

/// `n` KernelSynth series generated in parallel; output order and content
/// depend only on the arguments.
pub fn kernelsynth_corpus(n: usize, length: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<Series>> {
    use rayon::prelude::*;
    let bank = KernelBank::default_for(length);
    derive_seeds(seed, n)
        .into_par_iter()
        .map(|s| kernelsynth_with(&bank, length, s, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_series() {
        let bank = KernelBank::default_for(64);
        assert_eq!(kernelsynth(&bank, 64, 5).unwrap(), kernelsynth(&bank, 64, 5).unwrap());
        assert_ne!(kernelsynth(&bank, 64, 5).unwrap().values, kernelsynth(&bank, 64, 6).unwrap().values);
    }

    #[test]
    fn linear_kernel_gives_affine_paths() {
        let bank = KernelBank {
            kernels: vec![Kernel::Linear { variance: 1.0 }],
            max_compose: 1,
        };
        let s = kernelsynth(&bank, 50, 3).unwrap();
        // Second differences of an affine path are only jitter noise.
        let max_dd = s
            .values
            .windows(3)
            .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
            .fold(0.0, f64::max);
        assert!(max_dd < 0.05, "{max_dd}");
    }

    #[test]
    fn every_bank_composition_factorizes() {
        let length = 96;
        let bank = KernelBank::default_for(length);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..40 {
            let k = bank.compose(&mut rng).unwrap();
            let gram = k.gram(length);
            let trace: f64 = (0..length).map(|i| gram[i * length + i]).sum();
            let (_, jitter) = cholesky_with_jitter(&gram, length).unwrap();
            assert!(jitter <= 1e-4 * trace / length as f64 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn empirical_covariance_matches_kernel() {
        let length = 40;
        let kernel = Kernel::Rbf { lengthscale: 8.0 };
        let (l, _) = cholesky_with_jitter(&kernel.gram(length), length).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (a, b) = (10, 14);
        let n = 500;
        let mut sum = 0.0;
        for _ in 0..n {
            let path = sample_with_factor(&l, length, &mut rng);
            sum += path[a] * path[b];
        }
        let empirical = sum / n as f64;
        let analytic = kernel.eval(a as f64, b as f64, length);
        assert!(((empirical - analytic) / analytic).abs() < 0.15, "{empirical} vs {analytic}");
    }

    #[test]
    fn too_short_is_rejected() {
        let bank = KernelBank::default_for(8);
        assert!(matches!(kernelsynth(&bank, 1, 0), Err(Error::InsufficientLength { .. })));
    }

    #[test]
    fn corpus_is_deterministic() {
        let opts = SynthOptions::default();
        let a = kernelsynth_corpus(4, 32, 7, &opts).unwrap();
        let b = kernelsynth_corpus(4, 32, 7, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }
}
