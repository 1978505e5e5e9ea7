//! Adam optimizer with per-group learning rates.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::params::{ParamGroup, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip applied per group; disabled when <= 0.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 10.0 }
    }
}

/// First/second-moment state, one slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    /// Learning rate per group; groups without an entry are skipped entirely
    /// (notably [`ParamGroup::Target`]).
    lrs: HashMap<ParamGroup, f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Per-group step counters for bias correction.
    t: HashMap<ParamGroup, u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig, lrs: &[(ParamGroup, f64)]) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.value.data.len()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.value.data.len()]).collect();
        Adam {
            cfg,
            lrs: lrs.iter().cloned().collect(),
            m,
            v,
            t: HashMap::new(),
        }
    }

    /// Apply one update from the gradients currently in `store`, for the
    /// given groups only. Gradients are left untouched; call
    /// [`ParamStore::zero_grads`] afterwards.
    pub fn step(&mut self, store: &mut ParamStore, groups: &[ParamGroup]) -> Result<()> {
        for &group in groups {
            let lr = match self.lrs.get(&group) {
                Some(&lr) => lr,
                None => continue,
            };
            let t = self.t.entry(group).or_insert(0);
            *t += 1;
            let tf = *t as i32;
            let bc1 = 1.0 - self.cfg.beta1.powi(tf);
            let bc2 = 1.0 - self.cfg.beta2.powi(tf);

            // Global-norm clip over all tensors in the group.
            let mut scale = 1.0;
            if self.cfg.grad_clip > 0.0 {
                let mut sq = 0.0;
                for (_, tensor) in store.iter() {
                    if tensor.group != group {
                        continue;
                    }
                    for &g in &tensor.grad.data {
                        sq += g * g;
                    }
                }
                let norm = sq.sqrt();
                if !norm.is_finite() {
                    return Err(Error::NonFinite(format!("gradient norm for group {}", group.name())));
                }
                if norm > self.cfg.grad_clip {
                    scale = self.cfg.grad_clip / norm;
                }
            }

            for slot in 0..store.len() {
                let id = crate::nn::params::ParamId(slot);
                if store.get(id).group != group {
                    continue;
                }
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                let tensor = store.get_mut(id);
                for i in 0..tensor.value.data.len() {
                    let g = tensor.grad.data[i] * scale;
                    m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                    v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    tensor.value.data[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                }
                if !tensor.value.is_finite() {
                    return Err(Error::NonFinite(format!("parameter {} after optimizer step", tensor.name)));
                }
            }
        }
        Ok(())
    }
}
