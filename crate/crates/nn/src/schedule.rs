//! Learning-rate schedules.

use crate::{Error, Result};

/// Half-cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Domain(format!("step {step} beyond schedule length {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Piecewise-constant decay: multiply by `factor` at each milestone fraction
/// of `total_epochs` that `epoch` has reached.
pub fn step_lr(epoch: usize, total_epochs: usize, base_lr: f64, milestones: &[f64], factor: f64) -> f64 {
    let passed = milestones
        .iter()
        .filter(|&&m| epoch as f64 >= (m * total_epochs as f64).round())
        .count();
    base_lr * factor.powi(passed as i32)
}

/// Which schedule a training loop follows.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
    /// Step decay by 10× at 60% and 80% of training.
    Step,
}

impl LrSchedule {
    pub fn lr_at(self, step: usize, total: usize, base_lr: f64) -> f64 {
        match self {
            LrSchedule::Constant => base_lr,
            LrSchedule::Cosine => cosine_lr(step.min(total), total, base_lr).unwrap_or(0.0),
            LrSchedule::Step => step_lr(step, total, base_lr, &[0.6, 0.8], 0.1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.03).unwrap(), 0.03);
        assert!(cosine_lr(100, 100, 0.03).unwrap().abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.03).unwrap() - 0.015).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.03).is_err());
    }

    #[test]
    fn step_decay_at_sixty_and_eighty_percent() {
        let lr = |e| step_lr(e, 100, 30.0, &[0.6, 0.8], 0.1);
        assert_eq!(lr(0), 30.0);
        assert_eq!(lr(59), 30.0);
        assert!((lr(60) - 3.0).abs() < 1e-12);
        assert!((lr(85) - 0.3).abs() < 1e-12);
        assert!((lr(90) - 0.3).abs() < 1e-12);
    }
}
