use serde::{Deserialize, Serialize};

use super::NumError;

/// Linear warmup to `base_lr`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self, NumError> {
        if warmup_steps == 0 || warmup_steps > total_steps {
            return Err(NumError::InvalidArgument(format!(
                "warmup steps {warmup_steps} must be in 1..={total_steps}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr(&self, step: usize) -> Result<f64, NumError> {
        if step > self.total_steps {
            return Err(NumError::ScheduleRange {
                step,
                total: self.total_steps,
            });
        }
        if step <= self.warmup_steps {
            return Ok(self.base_lr * (step as f64 / self.warmup_steps as f64));
        }
        let remaining = (self.total_steps - step) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        Ok(self.base_lr * (remaining / span))
    }
}
