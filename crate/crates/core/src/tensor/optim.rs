//! Parameter update rules. Adam is the default; plain SGD stays available as
//! a config option. A step is atomic: if any gradient is non-finite the whole
//! step is rejected (naming the parameter) and nothing is mutated.

use serde::{Deserialize, Serialize};

use super::{Element, Parameter};
use crate::error::{Error, Result};

/// Optimizer selection for configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over every parameter; gradients are
    /// zeroed afterwards.
    pub fn step<T: Element>(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        reject_non_finite(params)?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64c(self.beta1), T::from_f64c(self.beta2));
        let (nb1, nb2) = (T::from_f64c(1.0 - self.beta1), T::from_f64c(1.0 - self.beta2));
        let lr = T::from_f64c(self.lr);
        let eps = T::from_f64c(self.epsilon);
        let (ibc1, ibc2) = (T::from_f64c(1.0 / bc1), T::from_f64c(1.0 / bc2));
        for p in params.iter_mut() {
            let (data, grad, m, v) = p.update_views();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + nb1 * g;
                v[i] = b2 * v[i] + nb2 * g * g;
                let m_hat = m[i] * ibc1;
                let v_hat = v[i] * ibc2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step<T: Element>(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        reject_non_finite(params)?;
        let lr = T::from_f64c(self.lr);
        for p in params.iter_mut() {
            let (data, grad, _, _) = p.update_views();
            for i in 0..data.len() {
                data[i] = data[i] - lr * grad[i];
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Either update rule behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(lr)),
        }
    }

    pub fn step<T: Element>(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params),
            Optimizer::Sgd(s) => s.step(params),
        }
    }
}

fn reject_non_finite<T: Element>(params: &[&mut Parameter<T>]) -> Result<()> {
    for p in params.iter() {
        if !p.grad().iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient { name: p.name().to_string() });
        }
    }
    Ok(())
}
