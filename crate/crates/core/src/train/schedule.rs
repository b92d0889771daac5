use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak` over the first `warmup_factor * total`
/// steps, then linear decay to 0 at `total`.
pub fn lr_schedule(step: u64, total: u64, peak: f64, warmup_factor: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("learning-rate schedule needs at least one step".into()));
    }
    if step > total {
        return Err(Error::Contract(format!("step {step} is past the last step {total}")));
    }
    if !(0.0..1.0).contains(&warmup_factor) {
        return Err(Error::Config(format!("warmup_factor {warmup_factor} must lie in [0, 1)")));
    }
    let (s, t) = (step as f64, total as f64);
    let warm = warmup_factor * t;
    Ok(if s < warm {
        peak * s / warm
    } else {
        peak * (t - s) / (t - warm)
    })
}
