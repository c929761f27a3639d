//! Optimizers and the polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// `base_lr * (1 - iteration / total)^power`.
pub fn poly_lr(base_lr: f64, iteration: u64, total: u64, power: f64) -> Result<f64> {
    if total == 0 || iteration > total {
        return Err(Error::Config(format!("poly schedule: iteration {iteration} outside 0..={total}")));
    }
    Ok(base_lr * (1.0 - iteration as f64 / total as f64).powf(power))
}

fn check_grads(params: &ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("optimizer step", params.len(), grads.len()));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer step", format!("{name} {:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            if self.momentum == 0.0 {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
                continue;
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }

    pub fn state(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn state_mut(&mut self) -> &mut [Tensor] {
        &mut self.velocity
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    pub fn moments_mut(&mut self) -> (&mut [Tensor], &mut [Tensor]) {
        (&mut self.first, &mut self.second)
    }
}
