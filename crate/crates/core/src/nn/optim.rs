use super::model::{Gradients, Model, ParamGroup};
use super::NnError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; never applied to the perception head.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<(), NnError> {
        if grads.values.len() != model.params.len() || self.m.len() != model.params.len() {
            return Err(NnError::ShapeMismatch("optimizer state does not match the model".into()));
        }
        for ((p, g), m) in model.params.iter().zip(&grads.values).zip(&self.m) {
            if g.len() != p.tensor.len() || m.len() != p.tensor.len() {
                return Err(NnError::ShapeMismatch(format!("gradient for {} has wrong length", p.name)));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGrad(p.name.clone()));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in model.params.iter_mut().enumerate() {
            let decay = if p.group == ParamGroup::PerceptionHead { 0.0 } else { c.weight_decay };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.values[i]);
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let w = &mut p.tensor.values[j];
                *w -= c.lr * (mhat / (vhat.sqrt() + c.eps) + decay * *w);
            }
        }
        Ok(())
    }
}
