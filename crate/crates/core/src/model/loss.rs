use crate::error::{Error, Result};
use crate::frame::{Mask, ProbMap, IGNORE, POS};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce(p: f64, positive: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy over non-IGNORE pixels, and its gradient with
/// respect to the logits (`(p - y) / n` at counted pixels, exactly zero at
/// IGNORE pixels). An all-IGNORE mask gives zero loss and zero gradient.
pub fn masked_bce_loss(probs: &ProbMap, labels: &Mask) -> Result<(f64, Vec<f64>)> {
    if probs.dims() != labels.dims() {
        return Err(Error::param(format!(
            "probability map {:?} and labels {:?} differ in size",
            probs.dims(),
            labels.dims()
        )));
    }
    let counted = labels.labels().iter().filter(|l| **l != IGNORE).count();
    let mut grad = vec![0.0; labels.labels().len()];
    if counted == 0 {
        return Ok((0.0, grad));
    }
    let n = counted as f64;
    let mut loss = 0.0;
    for ((g, p), l) in grad.iter_mut().zip(probs.probs()).zip(labels.labels()) {
        if *l == IGNORE {
            continue;
        }
        let y = *l == POS;
        loss += bce(*p, y);
        *g = (p - if y { 1.0 } else { 0.0 }) / n;
    }
    Ok((loss / n, grad))
}

/// Frame-level BCE of the max-aggregated score. The gradient flows only to
/// the first pixel attaining the maximum.
pub fn frame_bce_loss(probs: &ProbMap, positive: bool) -> (f64, Vec<f64>) {
    let p = probs.probs();
    let (arg, pmax) = p
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if *v > bv {
                (i, *v)
            } else {
                (bi, bv)
            }
        });
    let mut grad = vec![0.0; p.len()];
    grad[arg] = pmax - if positive { 1.0 } else { 0.0 };
    (bce(pmax, positive), grad)
}
