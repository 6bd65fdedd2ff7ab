use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warm-up to `peak_lr`, then cosine annealing down to `floor_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn new(warmup_steps: usize, total_steps: usize, peak_lr: f64, floor_lr: f64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Invalid(format!(
                "warm-up {warmup_steps} must be shorter than {total_steps} total steps"
            )));
        }
        if !(floor_lr <= peak_lr) || floor_lr < 0.0 {
            return Err(Error::Invalid(format!("floor lr {floor_lr} above peak lr {peak_lr}")));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            peak_lr,
            floor_lr,
        })
    }

    /// Warm-up over the first `fraction` of `total_steps`.
    pub fn with_warmup_fraction(total_steps: usize, fraction: f64, peak_lr: f64, floor_lr: f64) -> Result<Self> {
        let warmup = ((total_steps as f64) * fraction).floor() as usize;
        Self::new(warmup.min(total_steps.saturating_sub(1)), total_steps, peak_lr, floor_lr)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::ScheduleOverrun {
                step,
                total: self.total_steps,
            });
        }
        let w = self.warmup_steps;
        if step < w {
            return Ok(self.peak_lr * step as f64 / w as f64);
        }
        let progress = (step - w) as f64 / (self.total_steps - w) as f64;
        Ok(self.floor_lr + (self.peak_lr - self.floor_lr) * (1.0 + (PI * progress).cos()) / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let s = LrSchedule::new(10, 110, 1e-3, 1e-5).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 1e-3);
        assert!((s.lr_at(110).unwrap() - 1e-5).abs() < 1e-18);
        assert!((s.lr_at(60).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-12);
        assert!(matches!(s.lr_at(111), Err(Error::ScheduleOverrun { .. })));
    }

    #[test]
    fn warmup_is_linear_and_zero_warmup_starts_at_peak() {
        let s = LrSchedule::new(4, 8, 2.0, 0.0).unwrap();
        assert_eq!(s.lr_at(1).unwrap(), 0.5);
        assert_eq!(s.lr_at(3).unwrap(), 1.5);
        let s0 = LrSchedule::new(0, 8, 2.0, 0.0).unwrap();
        assert_eq!(s0.lr_at(0).unwrap(), 2.0);
    }

    #[test]
    fn invalid_schedules() {
        assert!(LrSchedule::new(5, 5, 1.0, 0.0).is_err());
        assert!(LrSchedule::new(0, 5, 1.0, 2.0).is_err());
    }
}
