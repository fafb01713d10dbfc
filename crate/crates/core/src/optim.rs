//! AdamW with per-parameter learning rates.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Optimizer state. Moments and updated parameters are rounded to f32 after
/// every step so a state written to disk resumes bit-identically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// Applies one update. `lr_of` gives the learning rate for each name;
    /// parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &HashMap<String, Tensor>,
        lr_of: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            let g = &grads[name];
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let lr = lr_of(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = (c.beta1 * *mi + (1.0 - c.beta1) * gi) as f32 as f64;
                *vi = (c.beta2 * *vi + (1.0 - c.beta2) * gi * gi) as f32 as f64;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let updated = *pi - lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pi);
                *pi = updated as f32 as f64;
            }
        }
    }
}
