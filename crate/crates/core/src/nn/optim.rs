//! Optimizers and the polynomial learning-rate schedule.
//!
//! SGD uses classical momentum with the weight decay folded into the buffer:
//!
//! ```text
//! v ← μ·v + g + wd·p
//! p ← p − lr·v
//! ```
//!
//! Adam is the bias-corrected update with `ε = 1e-8` added to `sqrt(v̂)`.
//! Both replace each parameter with a fresh gradient-tracking leaf.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn check(op: &'static str, params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(
            op,
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op,
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter, allocated on the first step.
    pub buffers: Vec<Vec<f64>>,
}

impl Default for SgdState {
    fn default() -> Self {
        SgdState::new(0.9, 5e-4)
    }
}

impl SgdState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        self.step_each(params, grads, &vec![lr; params.len()])
    }

    /// As [`step`](Self::step) with one learning rate per parameter.
    pub fn step_each(&mut self, params: &mut [Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        self.step_active(params, grads, lrs, &vec![true; params.len()])
    }

    /// Steps only the parameters flagged in `active`. The others, and their
    /// momentum buffers, are left exactly as they are (no weight decay).
    pub fn step_active(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        lrs: &[f64],
        active: &[bool],
    ) -> Result<()> {
        check("sgd", params, grads)?;
        if lrs.len() != params.len() || active.len() != params.len() {
            return Err(Error::invalid("sgd", "one learning rate and flag per parameter required"));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.buffers.len() != params.len() {
            return Err(Error::invalid("sgd", "parameter count changed between steps"));
        }
        for ((((p, g), buf), &lr), _) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.buffers)
            .zip(lrs)
            .zip(active)
            .filter(|x| *x.1)
        {
            let mut next = p.to_vec();
            for ((w, &gv), v) in next.iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                *v = self.momentum * *v + gv + self.weight_decay * *w;
                *w -= lr * *v;
            }
            *p = Tensor::param(next, p.shape())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.9, 0.99)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        check("adam", params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("adam", "parameter count changed between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let mut next = p.to_vec();
            for (((w, &gv), mi), vi) in next
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gv;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            *p = Tensor::param(next, p.shape())?;
        }
        Ok(())
    }
}

/// Learning rates and optimizer constants shared by the training stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Base SGD rate of the segmentation network (and hypernetwork).
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Base Adam rate of the discriminator.
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Exponent of the polynomial decay applied to both rates.
    pub power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            disc_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            power: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn sgd(&self) -> SgdState {
        SgdState::new(self.momentum, self.weight_decay)
    }

    pub fn adam(&self) -> AdamState {
        AdamState::new(self.beta1, self.beta2)
    }

    pub fn schedule(&self, max_iter: usize) -> PolySchedule {
        PolySchedule {
            base_lr: self.lr,
            max_iter,
            power: self.power,
        }
    }

    pub fn disc_schedule(&self, max_iter: usize) -> PolySchedule {
        PolySchedule {
            base_lr: self.disc_lr,
            max_iter,
            power: self.power,
        }
    }
}

/// `lr(i) = base · (1 − i/max_iter)^power`, clamped at zero past the end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub max_iter: usize,
    pub power: f64,
}

impl PolySchedule {
    pub fn new(base_lr: f64, max_iter: usize) -> Self {
        PolySchedule {
            base_lr,
            max_iter,
            power: 0.9,
        }
    }

    pub fn lr(&self, iter: usize) -> f64 {
        if self.max_iter == 0 || iter >= self.max_iter {
            return 0.0;
        }
        self.base_lr * (1.0 - iter as f64 / self.max_iter as f64).powf(self.power)
    }
}
