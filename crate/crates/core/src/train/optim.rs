use core::f64::consts::PI;

use num_traits::Float;

use super::TrainConfig;
use crate::error::{bail, Result};
use crate::tensor::Scalar;

/// Linear warmup from 0 to the peak, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> Result<f64> {
    let (total, warmup) = (config.total_steps, config.warmup_steps);
    if step > total {
        bail!(OutOfRange, "step {step} beyond total steps {total}");
    }
    if step < warmup {
        return Ok(config.peak_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(config.min_lr + 0.5 * (config.peak_lr - config.min_lr) * (1.0 + Float::cos(PI * progress)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }

    /// One update at optimizer step `t >= 1`:
    /// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
    pub fn update<S: Scalar>(&self, theta: &mut [S], grad: &[S], m: &mut [S], v: &mut [S], lr: f64, t: u64) {
        debug_assert!(t >= 1);
        let bc1 = 1.0 - Float::powi(self.beta1, t as i32);
        let bc2 = 1.0 - Float::powi(self.beta2, t as i32);
        for i in 0..theta.len() {
            let g = grad[i].real();
            let mi = self.beta1 * m[i].real() + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v[i].real() + (1.0 - self.beta2) * g * g;
            let p = theta[i].real();
            let step = mi / bc1 / (Float::sqrt(vi / bc2) + self.eps) + self.weight_decay * p;
            m[i] = S::of(mi);
            v[i] = S::of(vi);
            theta[i] = S::of(p - lr * step);
        }
    }
}

/// Euclidean norm over every gradient, accumulated in f64.
pub fn global_norm<S: Scalar>(grads: &[alloc::vec::Vec<S>]) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|x| x.real() * x.real()).sum();
    Float::sqrt(sq)
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [alloc::vec::Vec<S>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for x in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *x = S::of(x.real() * scale);
        }
    }
    norm
}
