//! Learning-rate schedule, AdamW and global gradient-norm clipping.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Shape of the schedule: linear warmup from zero, cosine decay to `min_lr`
/// at `max_steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.max_steps {
            return self.min_lr;
        }
        let ratio = (step - self.warmup_steps) as f64 / (self.max_steps - self.warmup_steps) as f64;
        let coeff = 0.5 * (1.0 + (PI * ratio).cos());
        // Written from the peak down so the warmup boundary lands on it exactly.
        self.peak_lr - (1.0 - coeff) * (self.peak_lr - self.min_lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay. Element updates are
/// computed in f64 and stored back in `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S: Scalar = f32> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        AdamW {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One update. `decay[i]` selects which tensors receive weight decay.
    /// Non-finite gradients abort before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [Tensor<S>],
        grads: &[Tensor<S>],
        decay: &[bool],
        lr: f64,
        hp: &AdamWParams,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != decay.len() || params.len() != self.m.len() {
            return Err(Error::dim(
                "adamw_step",
                &[params.len(), self.m.len()],
                &[grads.len(), decay.len()],
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim("adamw_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in parameter tensor {i}")));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decay[i] { hp.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pj, gj)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = gj.to_f64();
                let mut w = pj.to_f64();
                w -= lr * wd * w;
                let mj = hp.beta1 * m[j].to_f64() + (1.0 - hp.beta1) * g;
                let vj = hp.beta2 * v[j].to_f64() + (1.0 - hp.beta2) * g * g;
                m[j] = S::from_f64(mj);
                v[j] = S::from_f64(vj);
                w -= lr * (mj / bc1) / ((vj / bc2).sqrt() + hp.eps);
                *pj = S::from_f64(w);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient tensor.
pub fn grad_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the factor applied (1 when untouched).
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Contract(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = grad_norm(grads);
    if !(norm > max_norm) {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for x in g.data_mut() {
            *x = S::from_f64(x.to_f64() * scale);
        }
    }
    Ok(scale)
}
