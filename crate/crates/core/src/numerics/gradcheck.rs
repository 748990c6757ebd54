//! Central finite-difference gradient checking.
//!
//! The checked function is reduced to a scalar through a fixed random
//! projection `L = Σ wᵢ·outᵢ`. Analytic gradients come from the tape;
//! numeric ones from `(L(x+h) − L(x−h)) / 2h` with the projection summed in
//! `f64`, so the only `f32` rounding is in the function itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f32 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Norm-wise relative error `‖a − n‖ / (‖a‖ + ‖n‖)` per input.
    pub rel_err: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }

    #[track_caller]
    pub fn assert_within(&self, tol: f64) {
        assert!(
            self.max_rel_err() <= tol,
            "gradient check failed: relative errors {:?} exceed {tol}",
            self.rel_err
        );
    }
}

/// Checks every input of `f` with the default step.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_gradients_with(inputs, DEFAULT_STEP, f)
}

pub fn check_gradients_with<F>(inputs: &[Tensor], step: f32, f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    // Projection weights depend only on the output size.
    let probe = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out_len = f(&probe, &vars).expect("forward").value().numel();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let weights: Vec<f32> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars).expect("forward");
    let w = tape.constant(Tensor::new(out.shape(), weights.clone()).expect("weights"));
    out.mul(w).expect("projection").sum().backward().expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad()).collect();

    let projected = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward").value();
        out.data()
            .iter()
            .zip(&weights)
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum()
    };

    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut diff2 = 0.0f64;
        let mut a2 = 0.0f64;
        let mut n2 = 0.0f64;
        for j in 0..input.numel() {
            let x = input.data()[j];
            let (hi, lo) = (x + step, x - step);
            xs[i].data_mut()[j] = hi;
            let f_hi = projected(&xs);
            xs[i].data_mut()[j] = lo;
            let f_lo = projected(&xs);
            xs[i].data_mut()[j] = x;
            let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
            let a = analytic[i].data()[j] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt() + n2.sqrt();
        rel_err.push(if denom < 1e-12 { 0.0 } else { diff2.sqrt() / denom });
    }
    GradCheck { rel_err }
}
