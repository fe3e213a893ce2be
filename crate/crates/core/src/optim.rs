//! AdamW with global gradient clipping, and the warmup + linear + cosine
//! learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-6,
            weight_decay: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(invalid("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid("eps and clip_norm must be positive, weight_decay nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl OptState {
    pub fn new(dim: usize, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptState {
            config,
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grad);
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// One AdamW step with decoupled weight decay and bias correction.
pub fn apply_update(theta: &mut [f64], grad: &[f64], state: &mut OptState, lr: f64) -> Result<UpdateStats> {
    if theta.len() != state.dim() || grad.len() != state.dim() {
        return Err(Error::Shape {
            expected: state.dim(),
            actual: if theta.len() != state.dim() {
                theta.len()
            } else {
                grad.len()
            },
        });
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(invalid(format!("learning rate {lr} must be positive")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            index: i,
        });
    }
    let c = state.config;
    let mut g = grad.to_vec();
    let grad_norm = clip_gradient(&mut g, c.clip_norm);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for i in 0..theta.len() {
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g[i];
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta[i]);
    }
    if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "parameters",
            index: i,
        });
    }
    Ok(UpdateStats {
        grad_norm,
        clipped: grad_norm > c.clip_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    LinearCosine,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub peak: f64,
    pub convert_lr: f64,
    pub convert_step: u64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::reference()
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

impl LrSchedule {
    /// Peak 1e-5 after 100 warmup steps, 2e-6 at step 300, 2e-7 at 2200.
    pub fn reference() -> Self {
        LrSchedule {
            kind: LrKind::LinearCosine,
            peak: 1.0e-5,
            convert_lr: 2.0e-6,
            convert_step: 300,
            min_lr: 2.0e-7,
            warmup_steps: 100,
            total_steps: 2200,
        }
    }

    /// Same shape with every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        LrSchedule {
            peak: self.peak * factor,
            convert_lr: self.convert_lr * factor,
            min_lr: self.min_lr * factor,
            ..*self
        }
    }

    /// Same shape stretched or squeezed onto `total_steps`.
    pub fn resized(&self, total_steps: u64) -> Self {
        let f = total_steps as f64 / self.total_steps as f64;
        let warmup_steps = ((self.warmup_steps as f64 * f).round() as u64).min(total_steps.saturating_sub(2));
        let convert_step = ((self.convert_step as f64 * f).round() as u64)
            .clamp(warmup_steps + 1, total_steps.saturating_sub(1).max(warmup_steps + 1));
        LrSchedule {
            warmup_steps,
            convert_step,
            total_steps,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr >= 0.0 && self.min_lr <= self.convert_lr && self.convert_lr <= self.peak) {
            return Err(invalid("learning rates must satisfy min_lr <= convert_lr <= peak"));
        }
        if !(self.peak > 0.0) {
            return Err(invalid("peak learning rate must be positive"));
        }
        let ordered = match self.kind {
            LrKind::LinearCosine => self.warmup_steps < self.convert_step && self.convert_step < self.total_steps,
            LrKind::Cosine => self.warmup_steps < self.total_steps,
        };
        if !ordered {
            return Err(invalid("steps must satisfy warmup < convert < total"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::ScheduleRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(lerp(0.0, self.peak, step as f64 / self.warmup_steps as f64));
        }
        let cosine = |from: f64, start: u64| {
            let tau = (step - start) as f64 / (self.total_steps - start) as f64;
            let w = 0.5 * (1.0 + (PI * tau).cos());
            self.min_lr * (1.0 - w) + from * w
        };
        Ok(match self.kind {
            LrKind::Cosine => cosine(self.peak, self.warmup_steps),
            LrKind::LinearCosine if step <= self.convert_step => {
                let t = (step - self.warmup_steps) as f64 / (self.convert_step - self.warmup_steps) as f64;
                lerp(self.peak, self.convert_lr, t)
            }
            LrKind::LinearCosine => cosine(self.convert_lr, self.convert_step),
        })
    }
}
