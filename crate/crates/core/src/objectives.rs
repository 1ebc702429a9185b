//! Training losses, their gradients, and evaluation metrics.
//!
//! Every loss returns its value together with the gradient with respect to
//! its direct input so the training pipeline can chain them.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::comm_rx::harden;
use crate::error::{invalid, Result};
use crate::neural::sigmoid;
use crate::numerics::pairwise_sum;

/// LLR magnitude beyond which the loss saturates.
pub const LLR_CLAMP: f64 = 40.0;
/// Floor applied to per-user rates before the fairness utility.
pub const RATE_FLOOR: f64 = 1e-6;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cross-entropy (bits) of one LLR against its true bit, and its derivative.
pub fn bit_cross_entropy(llr: f64, bit: u8) -> (f64, f64) {
    let sign = if bit == 1 { 1.0 } else { -1.0 };
    let clamped = llr.clamp(-LLR_CLAMP, LLR_CLAMP);
    let x = sign * clamped;
    let grad = if llr.abs() > LLR_CLAMP { 0.0 } else { sign * sigmoid(x) / LN_2 };
    (softplus(x) / LN_2, grad)
}

/// Mean BCE per bit position; `llrs` and `bits` hold `bits_per_symbol` values per symbol.
pub fn per_position_bce(llrs: &[f64], bits: &[u8], bits_per_symbol: usize) -> Vec<f64> {
    assert_eq!(llrs.len(), bits.len());
    let c = bits_per_symbol;
    let n = llrs.len() / c;
    (0..c)
        .map(|i| {
            let v: Vec<f64> = (0..n).map(|s| bit_cross_entropy(llrs[s * c + i], bits[s * c + i]).0).collect();
            if n == 0 {
                0.0
            } else {
                pairwise_sum(&v) / n as f64
            }
        })
        .collect()
}

/// Mean binary cross-entropy over all bits, with the gradient per LLR.
pub fn loss_comm_bce(llrs: &[f64], bits: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(llrs.len(), bits.len());
    let n = llrs.len().max(1) as f64;
    let (vals, grads): (Vec<f64>, Vec<f64>) = llrs
        .iter()
        .zip(bits)
        .map(|(&l, &b)| {
            let (v, g) = bit_cross_entropy(l, b);
            (v, g / n)
        })
        .unzip();
    (pairwise_sum(&vals) / n, grads)
}

/// Mean BCE (bits) of detection logits against target flags, with the gradient per logit.
pub fn loss_detect_bce(logits: &[f64], targets: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len().max(1) as f64;
    let (vals, grads): (Vec<f64>, Vec<f64>) = logits
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            let t = f64::from(u8::from(t));
            ((softplus(s) - t * s) / LN_2, (sigmoid(s) - t) / (LN_2 * n))
        })
        .unzip();
    (pairwise_sum(&vals) / n, grads)
}

/// Probability-space detection BCE with probabilities clamped away from 0 and 1.
pub fn detect_bce_from_probability(probs: &[f64], targets: &[bool]) -> f64 {
    let eps = 1e-15;
    let v: Vec<f64> = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            if t {
                -p.log2()
            } else {
                -(1.0 - p).log2()
            }
        })
        .collect();
    pairwise_sum(&v) / probs.len().max(1) as f64
}

/// Ground truth needed by the angle losses for one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleLabel {
    pub target: bool,
    pub angle: f64,
    pub window: usize,
    pub noise_var: f64,
}

fn angle_loss(estimates: &[f64], labels: &[AngleLabel], weight: impl Fn(&AngleLabel) -> f64) -> (f64, Vec<f64>) {
    assert_eq!(estimates.len(), labels.len());
    let n = estimates.len().max(1) as f64;
    let (vals, grads): (Vec<f64>, Vec<f64>) = estimates
        .iter()
        .zip(labels)
        .map(|(&est, lab)| {
            if !lab.target {
                return (0.0, 0.0);
            }
            let w = weight(lab);
            let e = lab.angle - est;
            (w * e * e, -2.0 * w * e / n)
        })
        .unzip();
    (pairwise_sum(&vals) / n, grads)
}

/// Squared AoA error scaled by `N/σ²`, so estimators sitting at the bound
/// contribute equally across window lengths and noise levels.
pub fn loss_angle_crb_normalized(estimates: &[f64], labels: &[AngleLabel]) -> (f64, Vec<f64>) {
    angle_loss(estimates, labels, |l| l.window as f64 / l.noise_var)
}

/// Plain mean squared AoA error over present targets.
pub fn loss_angle_unmodified(estimates: &[f64], labels: &[AngleLabel]) -> (f64, Vec<f64>) {
    angle_loss(estimates, labels, |_| 1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub comm: f64,
    pub detect: f64,
    pub angle: f64,
}

/// Weights of the three parts in the total loss.
pub fn loss_weights(sensing_weight: f64) -> LossParts {
    LossParts {
        comm: 1.0 - sensing_weight,
        detect: sensing_weight,
        angle: sensing_weight,
    }
}

pub fn loss_total(parts: &LossParts, sensing_weight: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&sensing_weight) {
        return invalid(format!("sensing weight must lie in [0, 1], got {sensing_weight}"));
    }
    let w = loss_weights(sensing_weight);
    Ok(w.comm * parts.comm + w.detect * parts.detect + w.angle * parts.angle)
}

/// Rate proxy of one user: `Σ_i (1 − BCE_i)` over bit positions.
pub fn user_rate(llrs: &[f64], bits: &[u8], bits_per_symbol: usize) -> f64 {
    per_position_bce(llrs, bits, bits_per_symbol).iter().map(|b| 1.0 - b).sum()
}

/// Negative α-fair utility of per-user rates, with its gradient per rate.
pub fn loss_alpha_fair(rates: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    if !(alpha >= 0.0) {
        return invalid(format!("fairness exponent must be >= 0, got {alpha}"));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rates.len());
    for &r in rates {
        let floored = r < RATE_FLOOR;
        let r = r.max(RATE_FLOOR);
        if alpha == 1.0 {
            loss -= r.log2();
            grads.push(if floored { 0.0 } else { -1.0 / (r * LN_2) });
        } else {
            loss -= r.powf(1.0 - alpha) / (1.0 - alpha);
            grads.push(if floored { 0.0 } else { -r.powf(-alpha) });
        }
    }
    Ok((loss, grads))
}

/// Bit-wise mutual information estimate in bits per symbol.
pub fn metric_bmi(llrs: &[f64], bits: &[u8], order: usize) -> f64 {
    let c = order.trailing_zeros() as usize;
    let total: f64 = per_position_bce(llrs, bits, c).iter().sum();
    (c as f64 - total).clamp(0.0, c as f64)
}

/// Hard-decision bit error rate.
pub fn metric_ber(llrs: &[f64], bits: &[u8]) -> f64 {
    let errs = llrs.iter().zip(bits).filter(|(l, b)| harden(**l) != **b).count();
    errs as f64 / llrs.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingMetrics {
    pub detection_rate: Option<f64>,
    pub false_alarm_rate: Option<f64>,
    pub rmse: Option<f64>,
    pub bias: Option<f64>,
}

/// Detection/false-alarm rates and AoA error statistics over present targets.
pub fn metric_sensing(decisions: &[bool], targets: &[bool], estimates: &[f64], angles: &[f64]) -> SensingMetrics {
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(pairwise_sum(v) / v.len() as f64) };
    let hits: Vec<f64> = decisions.iter().zip(targets).filter(|(_, &t)| t).map(|(&d, _)| f64::from(u8::from(d))).collect();
    let alarms: Vec<f64> = decisions.iter().zip(targets).filter(|(_, &t)| !t).map(|(&d, _)| f64::from(u8::from(d))).collect();
    let errors: Vec<f64> = estimates
        .iter()
        .zip(angles)
        .zip(targets)
        .filter(|(_, &t)| t)
        .map(|((e, a), _)| e - a)
        .collect();
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    SensingMetrics {
        detection_rate: mean(&hits),
        false_alarm_rate: mean(&alarms),
        rmse: mean(&sq).map(f64::sqrt),
        bias: mean(&errors),
    }
}
