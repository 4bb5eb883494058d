//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use super::param::ParamRef;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-parameter first/second moment buffers keyed by parameter name.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `params` at learning rate `lr`. Every parameter must
    /// have been reached by backward (or had a gradient accumulated manually)
    /// since its last zero_grad.
    pub fn step(&mut self, params: &[ParamRef], lr: f32) -> Result<()> {
        for p in params {
            if !p.grad_touched() {
                return Err(Error::MissingGrad(p.name().to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for p in params {
            let g = p.grad();
            let m = self
                .m
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(p.name().to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            if m.len() != g.len() {
                return Err(Error::Invalid(format!(
                    "moment buffer size mismatch for `{}`",
                    p.name()
                )));
            }
            let eps = self.cfg.eps;
            let wd = self.cfg.weight_decay;
            p.update(|w| {
                for i in 0..g.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    w[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * w[i]);
                }
            });
        }
        Ok(())
    }

    /// Moment buffers for checkpointing, in deterministic name order.
    pub fn state(&self) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| (n.clone(), self.m[n].clone(), self.v[n].clone()))
            .collect()
    }

    pub fn restore(&mut self, step: u64, state: Vec<(String, Vec<f32>, Vec<f32>)>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (n, m, v) in state {
            self.m.insert(n.clone(), m);
            self.v.insert(n, v);
        }
    }
}
