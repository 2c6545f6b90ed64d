//! Adversarial objectives.
//!
//! Clamped (data-driven) pairs are the "real" class for the discriminator,
//! unclamped (model) pairs the "fake" class.

use serde::{Deserialize, Serialize};

use crate::diff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::D_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `-log D`
    NonSaturating,
    /// `½ (log D - log(1 - D))²`, minimized on the decision boundary.
    BoundarySeeking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelLoss {
    /// Straight-through softmax features carry the discriminator gradient.
    ExpectedSoftmax,
    /// Sampled labels reweighted by `D / (1 - D)`.
    ImportanceWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossConfig {
    pub generator_loss: GeneratorLoss,
    pub label_loss: LabelLoss,
    pub disc_steps_per_gen_step: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            generator_loss: GeneratorLoss::BoundarySeeking,
            label_loss: LabelLoss::ExpectedSoftmax,
            disc_steps_per_gen_step: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.disc_steps_per_gen_step == 0 {
            return Err(Error::Config("disc_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rejects anything outside `[0, 1]` and clamps into `[D_FLOOR, 1 - D_FLOOR]`.
fn probabilities<'t>(d: &Var<'t>, what: &str) -> Result<Var<'t>> {
    let bad = d.with_value(|t| t.data().iter().any(|v| !(0.0..=1.0).contains(v)));
    if bad {
        return Err(Error::Contract(format!("{what} outside (0, 1)")));
    }
    Ok(d.clamp(D_FLOOR, 1.0 - D_FLOOR))
}

/// Mean of `-log D(clamped) - log(1 - D(unclamped))`.
///
/// The caller feeds the discriminator detached samples so only its own
/// parameters receive gradient.
pub fn disc_loss<'t>(d_clamped: &Var<'t>, d_unclamped: &Var<'t>) -> Result<Var<'t>> {
    let dc = probabilities(d_clamped, "D(clamped)")?;
    let du = probabilities(d_unclamped, "D(unclamped)")?;
    let real = dc.log().mean().neg();
    let fake = du.rsub_scalar(1.0).log().mean().neg();
    real.add(&fake)
}

fn boundary_seeking<'t>(d: &Var<'t>) -> Result<Var<'t>> {
    let log_odds = d.log().sub(&d.rsub_scalar(1.0).log())?;
    Ok(log_odds.mul(&log_odds)?.mean().scale(0.5))
}

/// Generator objective on the unclamped pair.
pub fn gen_loss<'t>(d_unclamped: &Var<'t>, kind: GeneratorLoss) -> Result<Var<'t>> {
    let d = probabilities(d_unclamped, "D(unclamped)")?;
    match kind {
        GeneratorLoss::NonSaturating => Ok(d.log().mean().neg()),
        GeneratorLoss::BoundarySeeking => boundary_seeking(&d),
    }
}

/// Encoder objective on the clamped pair: push the data-driven pair toward
/// the "fake" side (or onto the boundary for the boundary-seeking loss).
pub fn clamped_gen_loss<'t>(d_clamped: &Var<'t>, kind: GeneratorLoss) -> Result<Var<'t>> {
    let d = probabilities(d_clamped, "D(clamped)")?;
    match kind {
        GeneratorLoss::NonSaturating => Ok(d.rsub_scalar(1.0).log().mean().neg()),
        GeneratorLoss::BoundarySeeking => boundary_seeking(&d),
    }
}

/// Normalized weights `w_m ∝ D_m / (1 - D_m)`.
pub fn importance_weights(d: &[f64]) -> Vec<f64> {
    let ratios: Vec<f64> = d
        .iter()
        .map(|&v| {
            let v = v.clamp(D_FLOOR, 1.0 - D_FLOOR);
            v / (1.0 - v)
        })
        .collect();
    let total: f64 = ratios.iter().sum();
    ratios.iter().map(|r| r / total).collect()
}

/// Importance-weighted log-likelihood of sampled labels.
///
/// `sampled[b]` holds the `M` labels drawn for example `b` and `d` is the
/// `[batch, M]` matrix of discriminator outputs on each draw. Weights are
/// constants; gradient reaches `logits` only.
pub fn importance_weighted_label_loss<'t>(
    logits: &Var<'t>,
    sampled: &[Vec<usize>],
    d: &Tensor,
) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != sampled.len() || d.shape() != [sampled.len(), d.cols()] {
        return Err(Error::dim("importance_weighted_label_loss", &shape, d.shape()));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let m = d.cols();
    if m < 2 {
        return Err(Error::Config(format!("importance weighting needs M >= 2 samples, got {m}")));
    }
    let mut target = Tensor::zeros(&[batch, classes]);
    for (b, labels) in sampled.iter().enumerate() {
        if labels.len() != m {
            return Err(Error::dim("sampled labels", &[m], &[labels.len()]));
        }
        let w = importance_weights(d.row(b));
        for (&y, wm) in labels.iter().zip(w) {
            if y >= classes {
                return Err(Error::Contract(format!("label {y} outside [0, {classes})")));
            }
            target.row_mut(b)[y] += wm;
        }
    }
    let tape = logits.tape();
    let target = tape.constant(target);
    let log_p = logits.softmax_rows()?.log();
    Ok(target.mul(&log_p)?.sum().scale(-1.0 / batch as f64))
}
