//! Momentum SGD with cosine learning-rate decay.

use serde::{Deserialize, Serialize};

use super::model::Params;

/// Half-cosine from `lr` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(lr: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let p = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound.
    pub grad_clip: Option<f64>,
    /// Learning-rate multiplier for thresholds and leaks.
    pub neuron_lr: f64,
    pub min_v_th: f64,
    pub min_leak: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 0.0, grad_clip: None, neuron_lr: 0.1, min_v_th: 1e-3, min_leak: 0.01 }
    }
}

pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, params: &Params) -> Self {
        Self { cfg, velocity: vec![0.0; params.flat().len()] }
    }

    /// Applies one update with gradient `grads` already averaged over the batch.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        let n_w: usize = params.xbars.iter().map(|x| x.w.len()).sum();
        let mut g = grads.flat();
        let vals = params.flat();
        for i in 0..n_w {
            g[i] += self.cfg.weight_decay * vals[i];
        }
        if let Some(c) = self.cfg.grad_clip {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > c {
                let k = c / norm;
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
        for ((p, v), (i, gi)) in params.flat_mut().into_iter().zip(&mut self.velocity).zip(g.into_iter().enumerate()) {
            *v = self.cfg.momentum * *v + gi;
            let rate = if i < n_w { lr } else { lr * self.cfg.neuron_lr };
            *p -= rate * *v;
        }
        for n in &mut params.lifs {
            n.v_th = n.v_th.max(self.cfg.min_v_th);
            n.leak = n.leak.clamp(self.cfg.min_leak, 1.0);
        }
    }
}
