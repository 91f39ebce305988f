//! Sigmoid focal loss and smooth-L1 regression loss, each returning the
//! loss value together with its gradient.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `ln σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Sigmoid focal loss summed over non-ignored entries and divided by the
/// number of positives (at least 1). `targets[k]` is `Some(true)` for a
/// positive, `Some(false)` for a negative and `None` for an ignored entry,
/// which contributes neither loss nor gradient.
pub fn focal_loss(
    logits: &[f64],
    targets: &[Option<bool>],
    alpha: f64,
    gamma: f64,
) -> Result<LossGrad> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if let Some(k) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::Domain(format!(
            "logit {k} is not finite: {}",
            logits[k]
        )));
    }
    let npos = targets.iter().filter(|t| **t == Some(true)).count();
    let norm = 1.0 / npos.max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (k, (&z, t)) in logits.iter().zip(targets).enumerate() {
        let Some(positive) = *t else { continue };
        // with q the probability of the target class and s = ±1 its sign:
        // FL = −a (1−q)^γ ln q,  dFL/dz = s·a[γ q (1−q)^γ ln q − (1−q)^{γ+1}]
        let (s, a) = if positive {
            (1.0, alpha)
        } else {
            (-1.0, 1.0 - alpha)
        };
        let ln_q = log_sigmoid(s * z);
        let q = ln_q.exp();
        let one_minus_q = crate::tensor::sigmoid(-s * z);
        let mod_factor = one_minus_q.powf(gamma);
        value += -a * mod_factor * ln_q;
        grad[k] = s * a * (gamma * q * mod_factor * ln_q - mod_factor * one_minus_q) * norm;
    }
    Ok(LossGrad {
        value: value * norm,
        grad,
    })
}

/// Smooth-L1 averaged over all coordinates: `0.5 d²/β` for `|d| < β`,
/// `|d| − 0.5β` otherwise. Empty input gives zero.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<LossGrad> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    if pred.is_empty() {
        return Ok(LossGrad {
            value: 0.0,
            grad: Vec::new(),
        });
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < beta {
                value += 0.5 * d * d / beta;
                d / beta / n
            } else {
                value += d.abs() - 0.5 * beta;
                d.signum() / n
            }
        })
        .collect();
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}
