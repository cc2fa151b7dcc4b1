use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Quadratic,
    Cosine,
}

/// Linear warmup to `peak_lr`, then decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay: Decay,
}

pub const SHAMPOO_WARMUP_STEPS: usize = 1800;

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup ({}) must be shorter than the schedule ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "peak lr must be finite and non-negative, got {}",
                self.peak_lr
            )));
        }
        Ok(())
    }

    /// Learning rate at `step ∈ [0, total_steps]`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::ScheduleOverrun {
                step,
                total: self.total_steps,
            });
        }
        self.validate()?;
        if step < self.warmup_steps {
            return Ok(self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64);
        }
        let frac =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(match self.decay {
            Decay::Quadratic => self.peak_lr * (1.0 - frac).powi(2),
            Decay::Cosine => self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        })
    }
}

/// Warmup length used for runs far shorter than the 1800-step recipe:
/// `min(1800, 10% of total)`.
pub fn scaled_warmup(total_steps: usize) -> usize {
    SHAMPOO_WARMUP_STEPS.min(total_steps / 10)
}
