//! Decoupled-weight-decay Adam and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamId, ParameterStore, Tensor};

/// Linear warmup from 0 to `peak`, then cosine decay to 10% of `peak` at
/// `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; vectors (norm gains, biases) are not decayed.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParameterStore) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Tensor::zeros(params.value(id).shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update from the gradients stored in `params`; frozen parameters
    /// are skipped.
    pub fn step(&mut self, params: &mut ParameterStore, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if params.is_frozen(id) {
                continue;
            }
            let g = params.grad(id).data().to_vec();
            let decay = if params.value(id).shape().len() == 2 {
                c.weight_decay
            } else {
                0.0
            };
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let w = params.value_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + c.eps) + decay * w[i]);
            }
        }
    }
}

/// Scales stored gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(params: &mut ParameterStore, max_norm: f64) -> f64 {
    let ids: Vec<ParamId> = params.ids().filter(|&id| !params.is_frozen(id)).collect();
    let norm = ids
        .iter()
        .flat_map(|&id| params.grad(id).data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}
