use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak` followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_frac: f64,
}

impl Schedule {
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_frac * total_steps as f64).ceil() as usize
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if step > total_steps {
            return Err(Error::Invalid(format!(
                "step {step} past the end of a {total_steps}-step schedule"
            )));
        }
        let warmup = self.warmup_steps(total_steps).min(total_steps);
        if step < warmup {
            return Ok(self.peak * step as f64 / warmup as f64);
        }
        let decay = total_steps - warmup;
        if decay == 0 {
            return Ok(self.peak);
        }
        let progress = (step - warmup) as f64 / decay as f64;
        Ok(self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
