//! Learning-rate schedule, Adam and dynamic loss scaling.

use serde::{Deserialize, Serialize};

use crate::model::params::{Grads, ParamStore};

/// `lr0 · decay^epoch`.
pub fn lr_schedule(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let data = &mut store.get_mut(id).data;
            for (((w, g), m), v) in data.iter_mut().zip(grads.get(id)).zip(&mut self.first[i]).zip(&mut self.second[i]) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleOutcome {
    /// Gradients were finite and have been unscaled; apply the update.
    Apply,
    /// Non-finite gradients; the update must be skipped.
    Skip,
}

/// Dynamic loss scaling: the loss gradient is multiplied by `scale` before the
/// backward pass; overflowing steps are skipped and halve the scale, and a run
/// of `growth_interval` clean steps doubles it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicLossScaler {
    pub scale: f64,
    pub growth_interval: u64,
    pub clean_steps: u64,
}

impl Default for DynamicLossScaler {
    fn default() -> Self {
        Self::new(32768.0)
    }
}

impl DynamicLossScaler {
    pub fn new(scale: f64) -> Self {
        Self {
            scale,
            growth_interval: 2000,
            clean_steps: 0,
        }
    }

    /// Checks scaled gradients, unscales them in place when finite and advances the state.
    pub fn unscale(&mut self, grads: &mut Grads) -> ScaleOutcome {
        if !grads.is_finite() {
            self.scale = (self.scale / 2.0).max(f64::MIN_POSITIVE);
            self.clean_steps = 0;
            return ScaleOutcome::Skip;
        }
        grads.scale(1.0 / self.scale);
        self.clean_steps += 1;
        if self.clean_steps >= self.growth_interval {
            self.scale *= 2.0;
            self.clean_steps = 0;
        }
        ScaleOutcome::Apply
    }
}
