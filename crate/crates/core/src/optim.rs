//! Adam and the step-halving learning-rate schedule.

use std::collections::HashMap;

use rn_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::ParamSet;

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Advances the shared step counter; call once per optimisation step
    /// before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates `value` in place from `grad` with learning rate `lr`.
    pub fn update(&mut self, key: &str, value: &mut Tensor, grad: &Tensor, lr: f64) {
        assert!(self.step > 0, "begin_step must precede update");
        let n = value.len();
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((w, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }

    /// One step over every named gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)], lr: f64) {
        self.begin_step();
        for (name, g) in grads {
            let value = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown weight `{name}`"));
            self.update(name, value, g, lr);
        }
    }
}

/// Constant rate, then halved every `decay_every` epochs from `decay_start`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_start: usize,
    pub decay_every: usize,
}

impl LrSchedule {
    /// The pre-training schedule: 1e-4, halved every 25 epochs after 50.
    pub fn pretrain() -> Self {
        Self {
            initial: 1e-4,
            decay_start: 50,
            decay_every: 25,
        }
    }

    /// The teacher and finetune schedule: 5e-5, halved every 25 epochs after 25.
    pub fn finetune() -> Self {
        Self {
            initial: 5e-5,
            decay_start: 25,
            decay_every: 25,
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        if epoch < self.decay_start {
            return self.initial;
        }
        let halvings = 1 + (epoch - self.decay_start) / self.decay_every.max(1);
        self.initial * 0.5f64.powi(halvings as i32)
    }
}
