//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 1e-3,
        }
    }
}

/// Per-parameter first and second moment estimates.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in params.vars() {
            first.insert(name.clone(), var.as_tensor().zeros_like()?);
            second.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            cfg,
            step: 0,
            first,
            second,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.first, &self.second)
    }

    pub fn restore(
        cfg: AdamWConfig,
        step: u64,
        first: BTreeMap<String, Tensor>,
        second: BTreeMap<String, Tensor>,
    ) -> Self {
        Self {
            cfg,
            step,
            first,
            second,
        }
    }

    /// One update at learning rate `lr`:
    /// `w <- w (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in params.vars() {
            let w = var.as_tensor();
            let m = self
                .first
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer has no state for {name}")))?;
            let v = self.second.get_mut(name).expect("moments stored pairwise");
            let decayed = (w * (1.0 - lr * weight_decay))?;
            let updated = match grads.get(w) {
                Some(g) => {
                    let g = g.detach();
                    *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?;
                    *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
                    let m_hat = (&*m / bias1)?;
                    let v_hat = (&*v / bias2)?;
                    let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
                    (decayed - (delta * lr)?)?
                }
                None => {
                    *m = (&*m * beta1)?;
                    *v = (&*v * beta2)?;
                    let delta = ((&*m / bias1)? / ((&*v / bias2)?.sqrt()? + eps)?)?;
                    (decayed - (delta * lr)?)?
                }
            };
            var.set(&updated)?;
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at the final step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, total_steps: usize) -> Self {
        Self {
            lr_max,
            lr_min: 0.0,
            total_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_max;
        }
        let progress = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * progress).cos())
    }
}
