use serde::{Deserialize, Serialize};

use super::schedule::LrSchedule;
use crate::error::{Error, Result};

/// Optimizer hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub schedule: Option<LrSchedule>,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Parameters excluded from weight decay.
    no_decay: Vec<bool>,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig, schedule: Option<LrSchedule>) -> Self {
        Self {
            config,
            schedule,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            no_decay: vec![false; num_params],
        }
    }

    /// Marks parameters that must not be decayed (e.g. normalization scale/shift).
    pub fn with_no_decay(mut self, no_decay: Vec<bool>) -> Self {
        assert_eq!(no_decay.len(), self.m.len(), "decay mask length");
        self.no_decay = no_decay;
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> Result<f64> {
        match &self.schedule {
            Some(s) => s.lr_at(self.step),
            None => Ok(self.config.lr),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeError(format!(
                "adam over {} parameters got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let lr = self.current_lr()?;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            if !self.no_decay[i] {
                params[i] -= lr * weight_decay * params[i];
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let lr = 0.01;
        let mut opt = AdamState::new(3, AdamConfig { eps: 1e-12, ..cfg(lr, 0.0) }, None);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        opt.step(&mut p, &[0.3, -4.0, 1e-3]).unwrap();
        let expected = [-lr, lr, -lr];
        for i in 0..3 {
            assert!(((p[i] - before[i]) - expected[i]).abs() <= 1e-6 * lr);
        }
    }

    #[test]
    fn zero_gradient_and_zero_lr_are_identity() {
        let mut opt = AdamState::new(2, cfg(0.1, 0.0), None);
        let mut p = vec![0.7, -0.2];
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.7, -0.2]);
        let mut opt = AdamState::new(2, cfg(0.0, 0.0), None);
        opt.step(&mut p, &[5.0, -1.0]).unwrap();
        assert_eq!(p, vec![0.7, -0.2]);
    }

    #[test]
    fn decoupled_decay_shrinks_before_adam_delta() {
        let mut opt = AdamState::new(1, cfg(0.1, 0.5), None);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        let mut opt = AdamState::new(1, cfg(0.1, 0.5), None).with_no_decay(vec![true]);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0]).unwrap();
        assert_eq!(p[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut opt = AdamState::new(1, cfg(0.1, 0.0), None);
        let mut p = vec![1.0];
        assert!(matches!(opt.step(&mut p, &[f64::NAN]), Err(Error::NonFiniteGradient)));
        assert_eq!(opt.steps_taken(), 0);
    }
}
