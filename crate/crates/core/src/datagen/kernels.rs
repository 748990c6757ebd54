use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Covariance function over integer time indices `0..length`.
#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    /// `variance · (1 + xₛ·xₜ)` with `x = t / length`; samples are affine trends.
    Linear { variance: f64 },
    /// `exp(−(s − t)² / 2ℓ²)`.
    Rbf { lengthscale: f64 },
    /// `exp(−2·sin²(π|s − t| / period) / ℓ²)`.
    Periodic { period: f64, lengthscale: f64 },
    Sum(Box<Kernel>, Box<Kernel>),
    Product(Box<Kernel>, Box<Kernel>),
}

impl Kernel {
    pub fn eval(&self, s: f64, t: f64, length: usize) -> f64 {
        match self {
            Kernel::Linear { variance } => {
                let n = length.max(1) as f64;
                variance * (1.0 + (s / n) * (t / n))
            }
            Kernel::Rbf { lengthscale } => (-(s - t).powi(2) / (2.0 * lengthscale * lengthscale)).exp(),
            Kernel::Periodic { period, lengthscale } => {
                let sn = (std::f64::consts::PI * (s - t).abs() / period).sin();
                (-2.0 * sn * sn / (lengthscale * lengthscale)).exp()
            }
            Kernel::Sum(a, b) => a.eval(s, t, length) + b.eval(s, t, length),
            Kernel::Product(a, b) => a.eval(s, t, length) * b.eval(s, t, length),
        }
    }

    /// Dense symmetric gram matrix over `0..length`, row-major.
    pub fn gram(&self, length: usize) -> Vec<f64> {
        let mut k = vec![0.0; length * length];
        for i in 0..length {
            for j in 0..=i {
                let v = self.eval(i as f64, j as f64, length);
                k[i * length + j] = v;
                k[j * length + i] = v;
            }
        }
        k
    }
}

/// Lower-triangular Cholesky factor of a row-major `n × n` matrix, or
/// `None` when a pivot is not positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let (li, lj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let dot: f64 = li.iter().zip(lj).map(|(x, y)| x * y).sum();
            let v = a[i * n + j] - dot;
            if i == j {
                if !(v > 0.0) || !v.is_finite() {
                    return None;
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = v / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Relative jitter schedule: multiples of `trace / n` added to the diagonal.
pub const JITTER_STEPS: [f64; 3] = [1e-6, 1e-5, 1e-4];

/// Cholesky of `gram + jitter·I`, escalating the jitter until it succeeds.
/// Returns the factor and the absolute jitter used.
pub fn cholesky_with_jitter(gram: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let scale = (0..n).map(|i| gram[i * n + i]).sum::<f64>() / n.max(1) as f64;
    let mut last = 0.0;
    for rel in JITTER_STEPS {
        let jitter = rel * scale.max(f64::MIN_POSITIVE);
        let mut a = gram.to_vec();
        for i in 0..n {
            a[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&a, n) {
            return Ok((l, jitter));
        }
        last = jitter;
    }
    Err(Error::KernelDegenerate { jitter: last })
}

/// One zero-mean Gaussian-process path under `kernel`.
pub fn sample_gp(kernel: &Kernel, length: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gram = kernel.gram(length);
    let (l, _) = cholesky_with_jitter(&gram, length)?;
    Ok(sample_with_factor(&l, length, rng))
}

/// `L·z` for standard normal `z`.
pub fn sample_with_factor(l: &[f64], n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    (0..n)
        .map(|i| l[i * n..i * n + i + 1].iter().zip(&z).map(|(a, b)| a * b).sum())
        .collect()
}
