//! Segmentation losses. Cross-entropy terms are summed over voxels and
//! averaged over the batch; the weight penalty is a squared L2 norm.

use crate::nn::{Tape, Var};
use crate::{Error, Result};

/// Balance between the V-Net term, the deformation term and weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { a: 1.0, b: 1.0, c: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("A", self.a), ("B", self.b), ("C", self.c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("loss weight {n} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn batch_of(tape: &Tape, x: Var) -> Result<usize> {
    match tape.shape(x).first() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::Shape(format!("loss input {:?} has no batch axis", tape.shape(x)))),
    }
}

fn check_finite(tape: &Tape, x: Var) -> Result<()> {
    match tape.value(x).data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_target(target: &[f64]) -> Result<()> {
    if target.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("target must be binary".into()));
    }
    Ok(())
}

/// `Σ ‖w‖²` over `weights`.
pub fn squared_norm(tape: &mut Tape, weights: &[Var]) -> Result<Var> {
    let terms: Vec<Var> = weights.iter().map(|&w| tape.sum_squares(w)).collect();
    tape.sum(&terms)
}

/// Batch-mean cross-entropy of sigmoid logits against `target`.
pub fn ce_logits(tape: &mut Tape, logits: Var, target: &[f64]) -> Result<Var> {
    check_finite(tape, logits)?;
    check_target(target)?;
    let n = batch_of(tape, logits)?;
    let ce = tape.bce_with_logits(logits, target)?;
    Ok(tape.scale(ce, 1.0 / n as f64))
}

/// Batch-mean cross-entropy of probabilities against `target`.
pub fn ce_probs(tape: &mut Tape, probs: Var, target: &[f64]) -> Result<Var> {
    check_finite(tape, probs)?;
    check_target(target)?;
    let n = batch_of(tape, probs)?;
    let ce = tape.bce_with_probs(probs, target)?;
    Ok(tape.scale(ce, 1.0 / n as f64))
}

fn with_penalty(tape: &mut Tape, ce: Var, weights: &[Var], l2_coeff: f64) -> Result<Var> {
    if l2_coeff == 0.0 || weights.is_empty() {
        return Ok(ce);
    }
    let norm = squared_norm(tape, weights)?;
    let pen = tape.scale(norm, l2_coeff);
    tape.add(ce, pen)
}

/// V-Net loss: `CE(σ(logits), Y) + l2_coeff·‖W₁‖²`.
pub fn loss_vnet(tape: &mut Tape, logits: Var, target: &[f64], w1: &[Var], l2_coeff: f64) -> Result<Var> {
    let ce = ce_logits(tape, logits, target)?;
    with_penalty(tape, ce, w1, l2_coeff)
}

/// Deformation loss on the warped probability map: `CE(Y″, Y) + l2_coeff·‖W₂‖²`.
pub fn loss_deformation(tape: &mut Tape, warped: Var, target: &[f64], w2: &[Var], l2_coeff: f64) -> Result<Var> {
    let ce = ce_probs(tape, warped, target)?;
    with_penalty(tape, ce, w2, l2_coeff)
}

/// Joint loss `A·CE(Y′) + B·CE(Y″) + C·l2_coeff·(‖W₁‖² + ‖W₂‖²)`.
#[allow(clippy::too_many_arguments)]
pub fn loss_global(
    tape: &mut Tape,
    logits: Var,
    warped: Var,
    target: &[f64],
    w1: &[Var],
    w2: &[Var],
    weights: LossWeights,
    l2_coeff: f64,
) -> Result<Var> {
    Ok(global_parts(tape, logits, warped, target, w1, w2, weights, l2_coeff)?.total)
}

pub(crate) struct GlobalParts {
    pub vnet: Var,
    pub deformation: Var,
    pub total: Var,
}

/// Joint loss plus the two single-network losses it is built from.
#[allow(clippy::too_many_arguments)]
pub(crate) fn global_parts(
    tape: &mut Tape,
    logits: Var,
    warped: Var,
    target: &[f64],
    w1: &[Var],
    w2: &[Var],
    weights: LossWeights,
    l2_coeff: f64,
) -> Result<GlobalParts> {
    weights.validate()?;
    let ce1 = ce_logits(tape, logits, target)?;
    let ce2 = ce_probs(tape, warped, target)?;
    let n1 = squared_norm(tape, w1)?;
    let n2 = squared_norm(tape, w2)?;
    let p1 = tape.scale(n1, l2_coeff);
    let p2 = tape.scale(n2, l2_coeff);
    let vnet = tape.add(ce1, p1)?;
    let deformation = tape.add(ce2, p2)?;
    let norms = tape.add(n1, n2)?;
    let terms = [tape.scale(ce1, weights.a), tape.scale(ce2, weights.b), tape.scale(norms, weights.c * l2_coeff)];
    let total = tape.sum(&terms)?;
    Ok(GlobalParts { vnet, deformation, total })
}
