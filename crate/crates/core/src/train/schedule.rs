use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup from zero followed by cosine decay to zero, in optimizer
/// steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "base_lr must be finite and >= 0, got {}",
                self.base_lr
            )));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn lr(&self, step: usize) -> f64 {
        cosine_warmup_lr(self, step)
    }
}

/// Learning rate at optimizer step `step`; steps past the end clamp to the
/// final value (zero).
pub fn cosine_warmup_lr(cfg: &ScheduleConfig, step: usize) -> f64 {
    let warm = cfg.warmup_steps();
    let total = cfg.total_steps();
    if step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let decay = total - warm;
    // warmup spans the whole run: hold the peak
    if decay == 0 {
        return cfg.base_lr;
    }
    let progress = ((step - warm) as f64 / decay as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> ScheduleConfig {
        ScheduleConfig {
            base_lr: 5e-4,
            warmup_epochs: 10,
            total_epochs: 30,
            steps_per_epoch: 4,
        }
    }

    #[test]
    fn anchor_points() {
        let s = sched();
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(40), 5e-4);
        assert!((s.lr(80) - 2.5e-4).abs() < 1e-18);
        assert!(s.lr(120).abs() < 1e-20);
        assert_eq!(s.lr(10_000), s.lr(120));
    }

    #[test]
    fn warmup_is_linear() {
        let s = sched();
        assert!((s.lr(20) - 2.5e-4).abs() < 1e-18);
        assert!((s.lr(39) - 5e-4 * 39.0 / 40.0).abs() < 1e-18);
    }

    #[test]
    fn validation() {
        assert!(sched().validate().is_ok());
        let bad = ScheduleConfig {
            warmup_epochs: 31,
            ..sched()
        };
        assert!(bad.validate().is_err());
    }
}
