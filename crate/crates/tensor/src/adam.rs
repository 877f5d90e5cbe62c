//! Bias-corrected Adam.

use crate::params::{Binding, ParamSet};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update on a flat parameter slice; `step` is 1-based.
pub fn adam_update(
    values: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    cfg: &AdamConfig,
) {
    debug_assert_eq!(values.len(), grad.len());
    let b1t = 1.0 - cfg.beta1.powi(step as i32);
    let b2t = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..values.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mhat = m[i] / b1t;
        let vhat = v[i] / b2t;
        values[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

/// Optimizer state for a whole [`ParamSet`]: per-parameter first and second
/// moment accumulators plus the step count.
pub struct Adam {
    cfg: AdamConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.values.len()])
                .collect(),
            v: params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.values.len()])
                .collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies the gradients accumulated on `binding`'s leaves to `params`.
    pub fn step(&mut self, params: &mut ParamSet, binding: &Binding) {
        self.step += 1;
        for i in 0..params.len() {
            let grad = binding.leaves()[i].grad();
            let id = crate::params::ParamId(i);
            adam_update(
                params.values_mut(id),
                &grad,
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                &self.cfg,
            );
        }
    }
}
