//! Instance normalization and patching.
//!
//! During training the statistics come only from the first 30% of a series
//! so that the causal objective on the remaining 70% never sees information
//! from its own future through the normalization.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::series::Series;

/// Fraction of a series used for training-time normalization statistics.
pub const SOURCE_FRACTION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    /// Floored population standard deviation; always positive.
    pub std: f64,
    pub source_fraction: f64,
}

/// Smallest admissible standard deviation for a given mean.
pub fn std_floor(mean: f64) -> f64 {
    1e-3 * mean.abs() + 1e-6
}

/// Number of leading points that feed the statistics.
pub fn prefix_len(len: usize, fraction: f64) -> usize {
    // The epsilon keeps exact products like 0.3·10 from rounding below 3.
    (((len as f64) * fraction) + 1e-9).floor() as usize
}

impl NormStats {
    /// Mean and floored std of the observed points in `series[..prefix]`.
    pub fn from_prefix(series: &Series, fraction: f64) -> Result<Self> {
        let n = prefix_len(series.len(), fraction).min(series.len());
        let observed: Vec<f64> = (0..n).filter_map(|i| series.get(i)).collect();
        if observed.is_empty() {
            return Err(Error::Normalization {
                prefix_len: n,
                len: series.len(),
            });
        }
        let count = observed.len() as f64;
        let mean = observed.iter().sum::<f64>() / count;
        let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        Ok(Self {
            mean,
            std: var.sqrt().max(std_floor(mean)),
            source_fraction: fraction,
        })
    }

    /// Statistics over the whole series, used at inference time.
    pub fn from_full(series: &Series) -> Result<Self> {
        Self::from_prefix(series, 1.0)
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Leakage-safe training statistics from the first 30% of `series`.
pub fn compute_norm_stats(series: &Series) -> Result<NormStats> {
    NormStats::from_prefix(series, SOURCE_FRACTION)
}

/// Normalized values and observation indicators, left-padded to whole patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    /// `T × p` normalized values; missing and padded slots are zero.
    pub values: Tensor,
    /// `T × p` indicators: 1 observed, 0 missing or padding.
    pub observed: Tensor,
    /// Number of padding slots before the first series point.
    pub pad: usize,
}

impl Patches {
    pub fn n_patches(&self) -> usize {
        self.values.rows()
    }

    /// Model input `T × 2p`, each row `values ‖ indicators`.
    pub fn tokens(&self) -> Tensor {
        let p = self.values.cols();
        let t = self.values.rows();
        let mut data = Vec::with_capacity(2 * p * t);
        for r in 0..t {
            data.extend_from_slice(self.values.row(r));
            data.extend_from_slice(self.observed.row(r));
        }
        Tensor::new(vec![t, 2 * p], data).expect("token shape")
    }

    /// Blanks whole patch `i`: values zeroed, indicators cleared.
    pub fn mask_patch(&mut self, i: usize) {
        let p = self.values.cols();
        self.values.data_mut()[i * p..(i + 1) * p].fill(0.0);
        self.observed.data_mut()[i * p..(i + 1) * p].fill(0.0);
    }
}

/// Splits a normalized copy of `series` into `p_in`-sized patches.
pub fn patchify(series: &Series, p_in: usize, stats: &NormStats) -> Result<Patches> {
    if series.is_empty() {
        return Err(Error::EmptyInput("cannot patchify an empty series"));
    }
    if p_in == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let n = series.len();
    let t = n.div_ceil(p_in);
    let pad = t * p_in - n;
    let mut values = vec![0.0f32; t * p_in];
    let mut observed = vec![0.0f32; t * p_in];
    for i in 0..n {
        if let Some(v) = series.get(i) {
            values[pad + i] = stats.normalize(v) as f32;
            observed[pad + i] = 1.0;
        }
    }
    Ok(Patches {
        values: Tensor::new(vec![t, p_in], values)?,
        observed: Tensor::new(vec![t, p_in], observed)?,
        pad,
    })
}
