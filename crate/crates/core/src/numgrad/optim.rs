use serde::{Deserialize, Serialize};

use super::{Grads, NumError, ParamStore, Tensor};

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
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// The decay term is applied to the parameter directly, never folded into
/// the gradient moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.m.get(index).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.v.get(index).and_then(Option::as_ref)
    }

    /// One update over every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<(), NumError> {
        grads.check_finite(params)?;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let theta = params.get_mut(id);
            if theta.shape() != g.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "adamw",
                    left: theta.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
            }
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&Tensor> {
        self.velocity.get(index).and_then(Option::as_ref)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> Result<(), NumError> {
        grads.check_finite(params)?;
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let mu = self.momentum;
        for (id, g) in grads.iter() {
            let theta = params.get_mut(id);
            if theta.shape() != g.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "sgd",
                    left: theta.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let vel = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((p, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                *vi = mu * *vi + gi;
                *p -= lr * *vi;
            }
        }
        Ok(())
    }
}
