//! Quantile (pinball) loss.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// `q·(y − ŷ)` when `y ≥ ŷ`, else `(1 − q)·(ŷ − y)`.
pub fn pinball(y: f64, y_hat: f64, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidQuantile(q));
    }
    Ok(if y >= y_hat {
        q * (y - y_hat)
    } else {
        (1.0 - q) * (y_hat - y)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Weighted mean over all counted (target, level) terms.
    pub total: f64,
    /// Mean unweighted loss of each level over the unmasked targets.
    pub per_quantile: Vec<f64>,
    /// Unmasked targets times the number of levels.
    pub n_terms: usize,
}

/// Quantile loss of `preds` (`n_q × H`) against `targets` (`H`), ignoring
/// targets whose `mask` entry is zero. `weights` defaults to all ones.
pub fn quantile_loss(
    targets: &[f32],
    mask: &[f32],
    preds: &Tensor,
    levels: &[f32],
    weights: Option<&[f32]>,
) -> Result<LossReport> {
    let ones = vec![1.0; levels.len()];
    let weights = weights.unwrap_or(&ones);
    let tape = Tape::new();
    let (loss, n_terms) =
        tape.constant(preds.clone())
            .pinball_loss(targets, mask, levels, weights, targets.len())?;
    let h = targets.len();
    let counted = n_terms / levels.len();
    let per_quantile = levels
        .iter()
        .enumerate()
        .map(|(qi, &q)| {
            let mut s = 0.0;
            for t in 0..h {
                if mask[t] != 0.0 {
                    s += pinball(targets[t] as f64, preds.data()[qi * h + t] as f64, q as f64)?;
                }
            }
            Ok(s / counted as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport {
        total: loss.value().item()? as f64,
        per_quantile,
        n_terms,
    })
}

/// Differentiable quantile loss over grouped predictions
/// (`groups × n_q × width` against `groups × width` targets).
pub fn quantile_loss_var<'t>(
    preds: Var<'t>,
    targets: &[f32],
    mask: &[f32],
    levels: &[f32],
    weights: &[f32],
    width: usize,
) -> Result<(Var<'t>, usize)> {
    preds.pinball_loss(targets, mask, levels, weights, width)
}
