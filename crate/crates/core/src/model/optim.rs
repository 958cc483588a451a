use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_gamma` every `lr_step` steps
    /// (`lr_step = 0` disables decay).
    pub lr_gamma: f64,
    pub lr_step: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, lr_gamma: 1.0, lr_step: 0 }
    }
}

/// Adam with decoupled weight decay and step learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self { config, m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.lr_step == 0 {
            c.lr
        } else {
            c.lr * c.lr_gamma.powi((self.step / c.lr_step) as i32)
        }
    }

    /// Applies one update. A non-finite gradient is rejected and leaves both
    /// the parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(invalid(format!(
                "optimizer sized for {} parameters, got params {} / grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient at parameter {i}")));
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *p -= lr * c.weight_decay * *p;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut opt = AdamW::new(AdamWConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn quadratic_converges() {
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..Default::default() }, 1);
        let mut theta = vec![1.0];
        for _ in 0..1000 {
            let g = [2.0 * theta[0]];
            opt.step(&mut theta, &g).unwrap();
        }
        assert!(theta[0].abs() < 1e-3, "theta {}", theta[0]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        let mut p = vec![1.0, 1.0];
        assert!(opt.step(&mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.step_count(), 0);
        assert!(opt.step(&mut p, &[0.0]).is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let mut opt = AdamW::new(AdamWConfig { lr: 1.0, lr_gamma: 0.5, lr_step: 2, ..Default::default() }, 1);
        let mut p = vec![0.0];
        let mut lrs = Vec::new();
        for _ in 0..5 {
            lrs.push(opt.current_lr());
            opt.step(&mut p, &[0.0]).unwrap();
        }
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
    }
}
