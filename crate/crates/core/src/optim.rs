//! SGD with momentum, AdamW, and the step learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::ParamSet;

fn check_grads(params: &ParamSet) -> Result<()> {
    for p in params.iter() {
        if p.grad.len() != p.value.len() {
            return Err(Error::MissingGrad(p.name.clone()));
        }
    }
    Ok(())
}

/// `v ← μ·v + g`, `w ← w − η·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(invalid("sgd: need lr > 0 and 0 <= momentum < 1"));
        }
        let velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self {
            lr,
            momentum,
            velocity,
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_with_lr(params, self.lr)
    }

    /// One update using `lr` in place of the base rate (for schedules).
    pub fn step_with_lr(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        check_grads(params)?;
        if self.velocity.len() != params.len() {
            return Err(invalid("sgd: optimizer built for a different parameter set"));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            for ((w, g), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + g;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay:
/// `w ← w − lr·m̂/(√v̂ + eps) − lr·λ·w`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !(config.eps > 0.0) || config.weight_decay < 0.0 {
            return Err(invalid("adamw: need lr > 0, eps > 0, weight_decay >= 0"));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(invalid("adamw: betas must lie in [0, 1)"));
        }
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_with_lr(params, self.config.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        check_grads(params)?;
        if self.first.len() != params.len() {
            return Err(invalid("adamw: optimizer built for a different parameter set"));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - libm::pow(beta1, t as f64);
        let bias2 = 1.0 - libm::pow(beta2, t as f64);
        for ((p, m), v) in params
            .iter_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let decay = lr * weight_decay * *w;
                *w -= lr * m_hat / (libm::sqrt(v_hat) + eps) + decay;
            }
        }
        Ok(())
    }
}

/// Multiplies the base rate by `factor` from `drop_epoch` onward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSchedule {
    pub drop_epoch: usize,
    pub factor: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            drop_epoch: 160,
            factor: 0.1,
        }
    }
}

pub fn schedule_lr(epoch: usize, base_lr: f64, sched: &StepSchedule) -> f64 {
    if epoch < sched.drop_epoch {
        base_lr
    } else {
        base_lr * sched.factor
    }
}
