use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `ceil(warmup_ratio · total_steps)`, kept below `total_steps` so the decay
/// span is never empty.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    let w = (warmup_ratio * total_steps as f64).ceil() as usize;
    w.min(total_steps.saturating_sub(1))
}

/// Linear warmup from 0 to `peak_lr`, then half-cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("lr schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "step {step} is past the final step {total_steps}"
        )));
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup {
        return Ok(peak_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(0.5 * peak_lr * (1.0 + (PI * progress).cos()))
}
