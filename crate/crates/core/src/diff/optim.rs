use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay per unit learning rate; `0` disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer and learning-rate schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub adam: AdamConfig,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            adam: AdamConfig::default(),
            warmup_epochs: 20,
            decay_epochs: vec![20, 40],
            decay_factor: 0.1,
            total_epochs: 500,
            batch_size: 128,
            clip_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("base_lr and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm<S: crate::diff::Real>(grads: &mut crate::diff::Grads<S>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Learning rate for `epoch`: a linear ramp from 0 over the warm-up epochs,
/// then `base_lr` scaled by `decay_factor` once per decay milestone reached.
pub fn lr_at(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * epoch as f64 / cfg.warmup_epochs as f64;
    }
    let decays = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    cfg.base_lr * cfg.decay_factor.powi(decays as i32)
}
