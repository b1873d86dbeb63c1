use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    moments: &mut AdamMoments,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    moments.t += 1;
    let t = moments.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        let g = g.as_f64();
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let step = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        *p = T::of(p.as_f64() - step);
    }
    Ok(())
}

/// Cosine-annealed learning rate from `base_lr` at epoch 0 down to `floor` at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64, floor: f64) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let progress = (epoch.min(total_epochs) as f64) / total_epochs as f64;
    floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
