//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    moments: Vec<(ParamId, Tensor, Tensor)>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let moments = store
            .trainable()
            .map(|id| {
                let shape = store.value(id).shape();
                (id, Tensor::zeros(shape), Tensor::zeros(shape))
            })
            .collect();
        Self {
            config,
            moments,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// One update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, m, v) in &mut self.moments {
            let grad = store.grad(*id).data().to_vec();
            let theta = store.value_mut(*id).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for k in 0..theta.len() {
                theta[k] -= lr * weight_decay * theta[k];
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                theta[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then cosine decay to
/// `lr_min` at `total_steps`.
pub fn lr_schedule(
    step: usize,
    total_steps: usize,
    warmup: usize,
    lr_max: f64,
    lr_min: f64,
) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}
