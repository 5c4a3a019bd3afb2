//! Adam with decoupled weight decay and the cosine learning-rate schedule.

use thiserror::Error;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {name} at element {element}")]
    NonFiniteGradient { name: String, element: usize },
    #[error("gradient for {name} has shape {got:?}, parameter has {expected:?}")]
    GradientShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} gradients, got {got}")]
    GradientCount { expected: usize, got: usize },
    #[error("learning rate {0} must be finite and non-negative")]
    BadLearningRate(f64),
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("step {step} beyond schedule length {total}")]
    StepOutOfRange { step: u64, total: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |s: &ParamStore| -> Vec<Tensor> {
            s.iter()
                .map(|(_, p)| Tensor::new(p.value.shape().to_vec(), vec![0.0; p.value.numel()]).unwrap())
                .collect()
        };
        Self {
            config,
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }

    /// One update of every unfrozen parameter. Gradients are validated
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), OptimError> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(OptimError::BadLearningRate(lr));
        }
        if grads.len() != store.len() {
            return Err(OptimError::GradientCount {
                expected: store.len(),
                got: grads.len(),
            });
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if p.frozen {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(OptimError::GradientShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if let Some(element) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: p.name.clone(),
                    element,
                });
            }
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                *w -= lr * weight_decay * *w;
                *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base · ½(1 + cos(π t / T))`.
pub fn cosine_lr(step: u64, total: u64, base: f64) -> Result<f64, OptimError> {
    if total == 0 {
        return Err(OptimError::EmptySchedule);
    }
    if step > total {
        return Err(OptimError::StepOutOfRange { step, total });
    }
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}
