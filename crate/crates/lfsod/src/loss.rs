//! Hybrid training objective: BCE + soft IoU + alignment loss, summed over
//! however many supervision heads the configuration emits.
//!
//! The alignment term is the differentiable counterpart of the evaluation
//! E-measure: no binarization, bias maps from the continuous prediction.

use crate::tensor::{GradientTape, TensorError, TensorId};

const BCE_CLAMP: f64 = 1e-7;
const EM_EPS: f64 = 1e-8;

fn require_same_shape(
    op: &'static str,
    tape: &GradientTape,
    p: TensorId,
    g: TensorId,
) -> Result<(), TensorError> {
    if tape.shape(p) != tape.shape(g) {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", tape.shape(p), tape.shape(g)),
        });
    }
    Ok(())
}

/// Pixel-mean binary cross entropy with the prediction clamped to
/// [1e-7, 1-1e-7] so gradients stay finite at saturation.
pub fn bce_loss(tape: &mut GradientTape, p: TensorId, g: TensorId) -> Result<TensorId, TensorError> {
    require_same_shape("bce_loss", tape, p, g)?;
    let pc = tape.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let ln_p = tape.ln(pc)?;
    let neg_pc = tape.scale(pc, -1.0)?;
    let one_minus_p = tape.add_const(neg_pc, 1.0)?;
    let ln_q = tape.ln(one_minus_p)?;
    let pos = tape.mul(g, ln_p)?;
    let neg_g = tape.scale(g, -1.0)?;
    let one_minus_g = tape.add_const(neg_g, 1.0)?;
    let neg = tape.mul(one_minus_g, ln_q)?;
    let sum = tape.add(pos, neg)?;
    let mean = tape.mean_all(sum)?;
    tape.scale(mean, -1.0)
}

/// Soft IoU loss `1 - (sum(p*g) + 1) / (sum(p + g - p*g) + 1)`.
pub fn iou_loss(tape: &mut GradientTape, p: TensorId, g: TensorId) -> Result<TensorId, TensorError> {
    require_same_shape("iou_loss", tape, p, g)?;
    let pg = tape.mul(p, g)?;
    let inter = tape.sum_all(pg)?;
    let sp = tape.sum_all(p)?;
    let sg = tape.sum_all(g)?;
    let both = tape.add(sp, sg)?;
    let union = tape.sub(both, inter)?;
    let num = tape.add_const(inter, 1.0)?;
    let den = tape.add_const(union, 1.0)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    tape.add_const(neg, 1.0)
}

/// Differentiable alignment loss `1 - E` on the continuous map: bias maps
/// `phi = x - mean(x)` for prediction and ground truth, alignment
/// `xi = 2 phi_g phi_p / (phi_g^2 + phi_p^2 + 1e-8)`, enhanced `(xi+1)^2/4`,
/// `E` its mean. Stays in [0,1].
pub fn em_loss(tape: &mut GradientTape, p: TensorId, g: TensorId) -> Result<TensorId, TensorError> {
    require_same_shape("em_loss", tape, p, g)?;
    let mp = tape.mean_all(p)?;
    let mg = tape.mean_all(g)?;
    let phi_p = tape.sub(p, mp)?;
    let phi_g = tape.sub(g, mg)?;
    let cross = tape.mul(phi_p, phi_g)?;
    let num = tape.scale(cross, 2.0)?;
    let p2 = tape.mul(phi_p, phi_p)?;
    let g2 = tape.mul(phi_g, phi_g)?;
    let den_raw = tape.add(p2, g2)?;
    let den = tape.add_const(den_raw, EM_EPS)?;
    let xi = tape.div(num, den)?;
    let shifted = tape.add_const(xi, 1.0)?;
    let sq = tape.mul(shifted, shifted)?;
    let enhanced = tape.scale(sq, 0.25)?;
    let e = tape.mean_all(enhanced)?;
    let neg = tape.scale(e, -1.0)?;
    tape.add_const(neg, 1.0)
}

/// Values of the three terms for one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub bce: f64,
    pub iou: f64,
    pub em: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.bce + self.iou + self.em
    }
}

/// Hybrid loss over all heads, with the scalar breakdown read back off the
/// tape and the total's node id kept for `backward`.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub per_head: Vec<LossTerms>,
    pub bce: f64,
    pub iou: f64,
    pub em: f64,
    pub total: f64,
    pub total_id: TensorId,
}

/// Sums BCE + IoU + alignment over every prediction head against one mask.
pub fn hybrid_loss(tape: &mut GradientTape, heads: &[TensorId], g: TensorId) -> Result<LossBreakdown, TensorError> {
    if heads.is_empty() {
        return Err(TensorError::ShapeMismatch { op: "hybrid_loss", detail: "no prediction heads".into() });
    }
    let mut per_head = Vec::with_capacity(heads.len());
    let mut total_id: Option<TensorId> = None;
    for &p in heads {
        let b = bce_loss(tape, p, g)?;
        let i = iou_loss(tape, p, g)?;
        let e = em_loss(tape, p, g)?;
        per_head.push(LossTerms {
            bce: tape.value(b).data[0],
            iou: tape.value(i).data[0],
            em: tape.value(e).data[0],
        });
        let bi = tape.add(b, i)?;
        let head_total = tape.add(bi, e)?;
        total_id = Some(match total_id {
            None => head_total,
            Some(acc) => tape.add(acc, head_total)?,
        });
    }
    let total_id = total_id.expect("at least one head");
    Ok(LossBreakdown {
        bce: per_head.iter().map(|t| t.bce).sum(),
        iou: per_head.iter().map(|t| t.iou).sum(),
        em: per_head.iter().map(|t| t.em).sum(),
        total: tape.value(total_id).data[0],
        per_head,
        total_id,
    })
}
