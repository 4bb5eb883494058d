//! Target-network updates: convex parameter blending with a linear rate ramp.

use crate::error::{Error, Result};
use crate::ndgrad::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmaSchedule {
    pub tau_start: f32,
    pub tau_end: f32,
    pub total_steps: u64,
}

impl EmaSchedule {
    /// Rate at step `i`: linear interpolation between the endpoints.
    pub fn rate(&self, i: u64) -> f32 {
        if self.total_steps == 0 {
            return self.tau_end;
        }
        let f = i as f64 / self.total_steps as f64;
        (self.tau_start as f64 + f * (self.tau_end as f64 - self.tau_start as f64)) as f32
    }
}

impl Default for EmaSchedule {
    fn default() -> Self {
        EmaSchedule {
            tau_start: 0.996,
            tau_end: 1.0,
            total_steps: 1,
        }
    }
}

/// `target <- tau * target + (1 - tau) * source`, elementwise per tensor.
///
/// The two sets must carry identical name sequences. Operates on raw values
/// only; gradients never flow into the target.
pub fn ema_update(target: &ParamSet, source: &ParamSet, tau: f32) -> Result<()> {
    if target.names() != source.names() {
        return Err(Error::Invalid(format!(
            "ema parameter name sets differ: {} target vs {} source names",
            target.len(),
            source.len()
        )));
    }
    for (t, s) in target.iter().zip(source.iter()) {
        if t.shape() != s.shape() {
            return Err(Error::Invalid(format!(
                "ema shape mismatch for `{}`: {:?} vs {:?}",
                t.name(),
                t.shape(),
                s.shape()
            )));
        }
        let sv = s.value();
        t.update(|tv| {
            for (a, b) in tv.iter_mut().zip(&sv) {
                *a = tau * *a + (1.0 - tau) * b;
            }
        });
    }
    Ok(())
}

/// Copy `source` values into `target` (phase-2 initialization).
pub fn copy_params(target: &ParamSet, source: &ParamSet) -> Result<()> {
    ema_update(target, source, 0.0)
}
