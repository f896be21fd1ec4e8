use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from `lr_min` to `lr_max`, then cosine annealing from
/// `lr_max` to `lr_min` restarted every `restart_period` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_epochs: f64,
    pub restart_period: f64,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_min: 2e-4,
            lr_max: 3e-3,
            warmup_epochs: 10.0,
            restart_period: 15.0,
            total_epochs: 75,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "train.schedule: need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.warmup_epochs >= 0.0) {
            return Err(Error::Config(
                "train.schedule.warmup_epochs must be non-negative".into(),
            ));
        }
        if !(self.restart_period > 0.0) {
            return Err(Error::Config("train.schedule.restart_period must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at a (possibly fractional) epoch.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let span = self.lr_max - self.lr_min;
        if epoch < self.warmup_epochs {
            return self.lr_min + span * epoch.max(0.0) / self.warmup_epochs;
        }
        let phase = (epoch - self.warmup_epochs).rem_euclid(self.restart_period);
        self.lr_min + 0.5 * span * (1.0 + (std::f64::consts::PI * phase / self.restart_period).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0.0), 2e-4);
        assert!((s.lr_at(5.0) - 1.6e-3).abs() < 1e-15);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = LrSchedule {
            warmup_epochs: 0.0,
            ..LrSchedule::default()
        };
        assert_eq!(s.lr_at(0.0), 3e-3);
    }
}
