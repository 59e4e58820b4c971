use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch value schedule, used for learning rates and skip strength `ν`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant {
        value: f64,
    },
    /// `initial · factor^⌊epoch / every⌋`.
    StepDecay {
        initial: f64,
        factor: f64,
        every: usize,
    },
    /// Linear from `initial` at epoch 0 to `target` at `end_epoch`, then held.
    LinearDecay {
        initial: f64,
        target: f64,
        end_epoch: usize,
    },
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule::Constant { value }
    }

    /// Value in effect during the zero-based `epoch`.
    pub fn value_at(&self, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::StepDecay {
                initial,
                factor,
                every,
            } => {
                let steps = if every == 0 { 0 } else { epoch / every };
                initial * factor.powi(steps.min(i32::MAX as usize) as i32)
            }
            Schedule::LinearDecay {
                initial,
                target,
                end_epoch,
            } => {
                if epoch >= end_epoch {
                    target
                } else {
                    initial + (target - initial) * (epoch as f64 / end_epoch as f64)
                }
            }
        }
    }

    fn endpoints(&self) -> Vec<f64> {
        match *self {
            Schedule::Constant { value } => vec![value],
            Schedule::StepDecay {
                initial, factor, ..
            } => vec![initial, factor],
            Schedule::LinearDecay {
                initial, target, ..
            } => vec![initial, target],
        }
    }

    /// Learning-rate schedules: finite and positive.
    pub fn validate_positive(&self, key: &str) -> Result<()> {
        if self.endpoints().iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::config(key, "schedule values must be finite and > 0"));
        }
        if let Schedule::StepDecay { every: 0, .. } = self {
            return Err(Error::config(key, "step decay period must be > 0"));
        }
        Ok(())
    }

    /// Skip-strength schedules: every value in `(0, 1]`. A step decay only
    /// approaches zero, so its factor must lie in `(0, 1]` as well.
    pub fn validate_nu(&self, key: &str) -> Result<()> {
        self.validate_positive(key)?;
        if self.endpoints().iter().any(|v| *v > 1.0) {
            return Err(Error::config(key, "skip strength must stay within (0, 1]"));
        }
        Ok(())
    }
}
