//! Rectified Adam.

use super::nn::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        RAdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which branch a step took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Variance not yet tractable: plain bias-corrected momentum.
    Momentum,
    /// Rectified adaptive update.
    Adaptive,
}

#[derive(Clone, Debug)]
pub struct RAdam {
    pub config: RAdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RAdam {
    pub fn new(config: RAdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        RAdam {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Length of the approximated simple moving average at step `t`.
    pub fn rho(beta2: f64, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let b2t = beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Applies one update using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<StepKind> {
        if store.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for ((name, t), m) in store.iter().zip(&self.m) {
            if t.numel() != m.len() {
                return Err(Error::Dimension(format!("parameter {name} changed size")));
            }
            if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let RAdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let t = self.t;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = Self::rho(beta2, t);
        let kind = if rho_t > 4.0 {
            StepKind::Adaptive
        } else {
            StepKind::Momentum
        };
        let rect = if kind == StepKind::Adaptive {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        } else {
            0.0
        };
        for ((tensor, m), v) in store.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = tensor.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                data[i] -= match kind {
                    StepKind::Adaptive => lr * rect * m_hat / ((v[i] / bc2).sqrt() + eps),
                    StepKind::Momentum => lr * m_hat,
                };
            }
        }
        Ok(kind)
    }
}
