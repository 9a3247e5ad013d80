//! Adam with decoupled weight decay, learning-rate schedules and gradient clipping.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters are left untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "state tracks {} parameters, got {} parameters and {} gradients",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || p.numel() != self.m[i].len() {
                return Err(Error::shape("adam_step", &[self.m[i].len()], &[g.len()]));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of parameter {i} at element {j} ({})", g[j]),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = T::of(1.0 - lr * weight_decay);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_m_b1, one_m_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                if weight_decay != 0.0 {
                    *w *= decay;
                }
                *mi = b1 * *mi + one_m_b1 * gi;
                *vi = b2 * *vi + one_m_b2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm and whether clipping happened.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> (f64, bool) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::of(max_norm / norm);
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x *= k);
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Learning-rate schedule evaluated per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr0: f64 },
    /// `lr0 * (1 + cos(pi * step / total_steps)) / 2`.
    CosineAnneal { lr0: f64, total_steps: usize },
    /// `lr0 * gamma^floor(epoch / every)`.
    StepDecay { lr0: f64, gamma: f64, every: usize },
}

impl LrSchedule {
    pub fn lr0(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr0 }
            | LrSchedule::CosineAnneal { lr0, .. }
            | LrSchedule::StepDecay { lr0, .. } => lr0,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr0 } => lr0,
            LrSchedule::CosineAnneal { lr0, total_steps } => {
                let frac = step.min(total_steps) as f64 / total_steps.max(1) as f64;
                lr0 * (1.0 + (PI * frac).cos()) / 2.0
            }
            LrSchedule::StepDecay { lr0, gamma, every } => {
                lr0 * gamma.powi((step / every.max(1)) as i32)
            }
        }
    }

    pub fn with_lr0(self, lr0: f64) -> Self {
        match self {
            LrSchedule::Constant { .. } => LrSchedule::Constant { lr0 },
            LrSchedule::CosineAnneal { total_steps, .. } => {
                LrSchedule::CosineAnneal { lr0, total_steps }
            }
            LrSchedule::StepDecay { gamma, every, .. } => LrSchedule::StepDecay { lr0, gamma, every },
        }
    }
}
