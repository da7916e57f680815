use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine annealing from `lr_init` to `lr_final` over `total_steps`, after an
/// optional linear warmup from `lr_final`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { lr_init: 4e-4, lr_final: 1e-6, total_steps: 2000, warmup_steps: 0 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::Config("schedule: need 0 < lr_final <= lr_init".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("schedule: warmup_steps exceeds total_steps".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` in `[0, total_steps]`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Training(format!("step {step} outside the schedule [0, {}]", self.total_steps)));
        }
        let (hi, lo) = (self.lr_init, self.lr_final);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return Ok(lo * (1.0 - t) + hi * t);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(hi);
        }
        let c = 0.5 * (1.0 + (PI * (step - self.warmup_steps) as f64 / span as f64).cos());
        // written as a convex combination so both endpoints are exact
        Ok((hi * c + lo * (1.0 - c)).clamp(lo, hi))
    }
}
