use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    Polynomial,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: DecayKind,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr_ratio: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: DecayKind::Polynomial, base_lr: 1e-3, warmup_steps: 200, total_steps: 3000, min_lr_ratio: 0.004 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "schedule.warmup_steps ({}) must be below schedule.total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0) {
            return Err(Error::config(format!("schedule.min_lr_ratio {} outside (0, 1]", self.min_lr_ratio)));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config("schedule.base_lr must be positive"));
        }
        Ok(())
    }

    /// Linear warmup from 0, then polynomial (power 1) or cosine decay to
    /// `base_lr * min_lr_ratio` at `total_steps`, flat afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let floor = self.min_lr_ratio;
        if step >= self.total_steps {
            return self.base_lr * floor;
        }
        let p = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let shape = match self.kind {
            DecayKind::Polynomial => 1.0 - p,
            DecayKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * p).cos()),
        };
        self.base_lr * (floor + (1.0 - floor) * shape)
    }
}
