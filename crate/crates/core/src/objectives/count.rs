//! Losses for the frame-count head: expected-value regression, the Gaussian
//! soft target and the mixed objective.
//!
//! Gradient variants take the head's logits, since that is where the network
//! receives them.

use super::KTargetConfig;
use crate::error::{Error, Result};
use crate::tensor::softmax;
use crate::types::KDistribution;

/// Probabilities below this are clamped before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-9;

/// Smooth L1 with transition point 1: value and derivative w.r.t. `delta`.
pub fn smooth_l1(delta: f64) -> (f64, f64) {
    if delta.abs() < 1.0 {
        (0.5 * delta * delta, delta)
    } else {
        (delta.abs() - 0.5, delta.signum())
    }
}

fn check_k_star(k_star: usize, k_max: usize) -> Result<()> {
    if k_star < 1 || k_star > k_max {
        return Err(Error::validation(format!("k* = {k_star} outside [1, {k_max}]")));
    }
    Ok(())
}

/// Smooth L1 between the distribution's expected count and `k_star`.
pub fn evo_loss(dist: &KDistribution, k_star: usize) -> Result<f64> {
    check_k_star(k_star, dist.k_max())?;
    Ok(smooth_l1(dist.expectation() - k_star as f64).0)
}

/// [`evo_loss`] of `softmax(logits)` with its gradient w.r.t. the logits.
pub fn evo_loss_grad(logits: &[f64], k_star: usize) -> Result<(f64, Vec<f64>)> {
    check_k_star(k_star, logits.len())?;
    let p = softmax(logits);
    let e: f64 = p.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
    let (value, d) = smooth_l1(e - k_star as f64);
    // dE/dz_j = p_j (j+1 - E)
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, pj)| d * pj * ((j + 1) as f64 - e))
        .collect();
    Ok((value, grad))
}

/// Truncated Gaussian over `k = 1..=k_max` centred at `k_star`, renormalised.
pub fn class_target(k_star: usize, k_max: usize, sigma: f64) -> Result<KDistribution> {
    if !(sigma > 0.0) {
        return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
    }
    check_k_star(k_star, k_max)?;
    let weights: Vec<f64> = (1..=k_max)
        .map(|k| {
            let z = (k as f64 - k_star as f64) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let sum: f64 = weights.iter().sum();
    KDistribution::new(weights.into_iter().map(|w| w / sum).collect())
}

/// Value of the mixed count loss and whether any probability was clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KHeadLoss {
    pub value: f64,
    pub clamped: bool,
}

/// `KL(target ∥ p)` with `ln p` clamped at [`LOG_CLAMP`].
fn kl_to_prediction(target: &[f64], probs: &[f64]) -> (f64, bool) {
    let mut clamped = false;
    let mut kl = 0.0;
    for (&t, &p) in target.iter().zip(probs) {
        if t <= 0.0 {
            continue;
        }
        if p < LOG_CLAMP {
            clamped = true;
        }
        kl += t * (t.ln() - p.max(LOG_CLAMP).ln());
    }
    (kl, clamped)
}

/// `(1 - α)·evo + α·KL(class_target ∥ dist)`.
pub fn k_head_loss(dist: &KDistribution, k_star: usize, cfg: &KTargetConfig) -> Result<KHeadLoss> {
    cfg.validate_mix()?;
    let evo = evo_loss(dist, k_star)?;
    let target = class_target(k_star, dist.k_max(), cfg.sigma)?;
    let (kl, clamped) = kl_to_prediction(target.probs(), dist.probs());
    Ok(KHeadLoss {
        value: (1.0 - cfg.alpha) * evo + cfg.alpha * kl,
        clamped,
    })
}

/// [`k_head_loss`] of `softmax(logits)` with its gradient w.r.t. the logits.
pub fn k_head_loss_grad(logits: &[f64], k_star: usize, cfg: &KTargetConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate_mix()?;
    let (evo, evo_grad) = evo_loss_grad(logits, k_star)?;
    let target = class_target(k_star, logits.len(), cfg.sigma)?;
    let t = target.probs();
    let p = softmax(logits);
    let (kl, _) = kl_to_prediction(t, &p);
    // d/dz_j of -Σ_k t_k ln p_k over unclamped k = -t_j [j unclamped] + p_j Σ_unclamped t_k
    let live: Vec<bool> = p.iter().map(|&pk| pk >= LOG_CLAMP).collect();
    let live_mass: f64 = t.iter().zip(&live).filter(|(_, &l)| l).map(|(tk, _)| tk).sum();
    let grad = (0..logits.len())
        .map(|j| {
            let kl_j = p[j] * live_mass - if live[j] { t[j] } else { 0.0 };
            (1.0 - cfg.alpha) * evo_grad[j] + cfg.alpha * kl_j
        })
        .collect();
    Ok(((1.0 - cfg.alpha) * evo + cfg.alpha * kl, grad))
}
