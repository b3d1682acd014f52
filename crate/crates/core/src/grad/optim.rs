use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradError, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr` at `max_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.max_steps {
            return if self.max_steps <= self.warmup_steps && step == self.warmup_steps {
                self.base_lr
            } else {
                self.min_lr
            };
        }
        let span = (self.max_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

/// Optimizer hyperparameters as they appear in run configuration; the
/// schedule horizon comes from the run's step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { base_lr: 1e-4, min_lr: 0.0, warmup_steps: 1000, weight_decay: 0.01, beta1: 0.8, beta2: 0.99, eps: 1e-8 }
    }
}

impl OptimizerSettings {
    pub fn adamw(&self, max_steps: u64) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            schedule: LrSchedule {
                base_lr: self.base_lr,
                min_lr: self.min_lr,
                warmup_steps: self.warmup_steps,
                max_steps,
            },
        }
    }
}

/// AdamW with decoupled weight decay. Moments are kept at parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: BTreeMap<String, Tensor<T>>,
    pub second_moment: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: BTreeMap<_, _> = params.iter().map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape()))).collect();
        Self { config, step_count: 0, first_moment: zeros.clone(), second_moment: zeros }
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.config.schedule.lr(self.step_count + 1)
    }

    /// One update. Every parameter must have a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<f64, GradError> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| GradError::MissingParam(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(GradError::ParamShape {
                    name: name.to_string(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        self.step_count += 1;
        let lr = self.config.schedule.lr(self.step_count);
        let c = &self.config;
        let t = self.step_count as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.first_moment.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.second_moment.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
