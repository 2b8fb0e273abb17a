//! AdamW with per-group learning rates and a cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selector::{GroupName, ParamGrads, SelectorParams};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

/// One optimizer instance over all groups. Moment buffers are allocated only
/// for the groups that are trainable when the optimizer is created.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    moments: Vec<Option<Vec<Moments>>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &SelectorParams, config: AdamWConfig) -> Self {
        let moments = params
            .groups()
            .iter()
            .map(|g| {
                g.trainable.then(|| {
                    g.tensors
                        .iter()
                        .map(|t| Moments {
                            m: Matrix::zeros(t.value.rows(), t.value.cols()),
                            v: Matrix::zeros(t.value.rows(), t.value.cols()),
                        })
                        .collect()
                })
            })
            .collect();
        Self { config, moments, t: 0 }
    }

    pub fn has_moments(&self, group: GroupName) -> bool {
        self.moments[group.index()].is_some()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Groups that are frozen, lack moments or have no
    /// positive rate in `lrs` are left untouched.
    pub fn step(
        &mut self,
        params: &mut SelectorParams,
        grads: &ParamGrads,
        lrs: &BTreeMap<GroupName, f64>,
    ) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for name in GroupName::ALL {
            let lr = lrs.get(&name).copied().unwrap_or(0.0);
            let Some(moments) = self.moments[name.index()].as_mut() else {
                continue;
            };
            let group = params.group_mut(name);
            if !group.trainable || lr <= 0.0 {
                continue;
            }
            for (i, (tensor, mom)) in group.tensors.iter_mut().zip(moments.iter_mut()).enumerate() {
                let g = grads.get(name, i).as_slice();
                let p = tensor.value.as_mut_slice();
                let m = mom.m.as_mut_slice();
                let v = mom.v.as_mut_slice();
                for j in 0..p.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    p[j] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[j]);
                }
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 towards zero at `max_steps`.
pub fn cosine_lr(base: f64, step: usize, max_steps: usize) -> f64 {
    if max_steps == 0 {
        return base;
    }
    let progress = (step as f64 / max_steps as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
