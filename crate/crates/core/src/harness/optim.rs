//! Learning-rate schedule and AdamW.

use crate::autodiff::Tensor;
use crate::error::{AnysegError, Result};

use super::config::OptimizerConfig;

/// Constant warm-up followed by polynomial decay, indexed by optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub power: f64,
    pub warmup_factor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(cfg: &OptimizerConfig, steps_per_epoch: usize) -> Self {
        let total_steps = cfg.epochs * steps_per_epoch;
        // warm-up spans whole epochs and always leaves one epoch of decay
        let warmup_epochs = if cfg.epochs < 2 || cfg.warmup_fraction == 0.0 {
            0
        } else {
            ((cfg.warmup_fraction * cfg.epochs as f64).round() as usize).clamp(1, cfg.epochs - 1)
        };
        Self {
            base: cfg.learning_rate,
            power: cfg.decay_power,
            warmup_factor: cfg.warmup_factor,
            warmup_steps: warmup_epochs * steps_per_epoch,
            total_steps,
        }
    }

    /// Rate at global step `step` (0-based).
    pub fn rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * self.warmup_factor;
        }
        let decay_steps = (self.total_steps - self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64).min(decay_steps);
        self.base * (1.0 - t / decay_steps).powf(self.power)
    }
}

/// Adam with decoupled weight decay, state in `f64`.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. A `None` gradient counts as zero.
    pub fn update(&mut self, params: Vec<&mut Tensor<f64>>, grads: &[Option<&Tensor<f64>>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AnysegError::Invariant(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(AnysegError::Invariant(format!(
                        "gradient shape {:?} differs from parameter shape {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}
