use serde::{Deserialize, Serialize};

use super::EngineError;

/// Linear warmup followed by step decay at evenly spaced milestones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub gamma: f64,
    pub num_decay_milestones: u64,
}

impl ScheduleConfig {
    /// Downstream preset: 2.5% warmup, then gamma 0.95 applied 100 times.
    pub fn ramp_up(total_steps: u64) -> Self {
        ScheduleConfig {
            total_steps,
            warmup_fraction: 0.025,
            gamma: 0.95,
            num_decay_milestones: 100,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(EngineError::InvalidSchedule(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EngineError::InvalidSchedule(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.total_steps < 2 {
            return Err(EngineError::InvalidSchedule("total_steps must be at least 2".into()));
        }
        if self.warmup_steps() >= self.total_steps {
            return Err(EngineError::InvalidSchedule("warmup covers every step".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_fraction * self.total_steps as f64).round() as u64).max(1)
    }
}

/// Learning rate at `step` (clamped to `[0, total_steps]`).
///
/// Warmup ramps linearly from 0 at step 0 to `base_lr` at the end of warmup.
/// The post-warmup span is cut into `num_decay_milestones` equal pieces and
/// each completed piece multiplies the rate by `gamma`.
pub fn lr_at(step: u64, schedule: &ScheduleConfig, base_lr: f64) -> f64 {
    let step = step.min(schedule.total_steps);
    let warmup = schedule.warmup_steps();
    if step <= warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = schedule.total_steps - warmup;
    let passed = ((step - warmup) as u128 * schedule.num_decay_milestones as u128 / span as u128) as i32;
    base_lr * schedule.gamma.powi(passed)
}
