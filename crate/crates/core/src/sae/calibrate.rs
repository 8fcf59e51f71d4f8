use ndarray::ArrayView2;

use super::SaeModel;
use crate::actstore::ActivationShard;
use crate::error::{Error, Result};

/// Allowed relative deviation of the mean active count from `k`.
pub const CALIBRATION_TOLERANCE: f64 = 0.02;

/// Mean over tokens of `|{i : z_pre,i > θ}|`.
pub fn mean_active_count(model: &SaeModel, tokens: ArrayView2<f64>, theta: f64) -> Result<f64> {
    if tokens.nrows() == 0 {
        return Err(Error::Empty("calibration tokens"));
    }
    let z = model.encode_pre_batch(tokens)?;
    Ok(z.iter().filter(|&&v| v > theta).count() as f64 / tokens.nrows() as f64)
}

/// Chooses the shared JumpReLU threshold so that `k` latents fire per token on
/// average, stores it in the model and returns it.
pub fn calibrate_jumprelu(model: &mut SaeModel, shards: &[ActivationShard]) -> Result<f64> {
    let mut positives = Vec::new();
    let mut n_tokens = 0usize;
    for shard in shards {
        if shard.d_model != model.d_model() {
            return Err(Error::dims("shard d_model", model.d_model(), shard.d_model));
        }
        let offset = model.shard_offset(shard);
        for m in &shard.matrices {
            let mut x = m.mapv(f64::from);
            if let Some(o) = &offset {
                x -= o;
            }
            collect_positive(model, x.view(), &mut positives)?;
            n_tokens += x.nrows();
        }
    }
    finish(model, positives, n_tokens)
}

pub fn calibrate_on_tokens(model: &mut SaeModel, tokens: ArrayView2<f64>) -> Result<f64> {
    let mut positives = Vec::new();
    collect_positive(model, tokens, &mut positives)?;
    finish(model, positives, tokens.nrows())
}

fn collect_positive(model: &SaeModel, x: ArrayView2<f64>, out: &mut Vec<f64>) -> Result<()> {
    let z = model.encode_pre_batch(x)?;
    out.extend(z.iter().copied().filter(|&v| v > 0.0));
    Ok(())
}

fn finish(model: &mut SaeModel, mut positives: Vec<f64>, n_tokens: usize) -> Result<f64> {
    if n_tokens == 0 {
        return Err(Error::Empty("calibration tokens"));
    }
    if positives.iter().any(|v| v.is_nan()) {
        return Err(Error::Invariant("NaN pre-activation during calibration".into()));
    }
    positives.sort_unstable_by(|a, b| b.total_cmp(a));
    let theta = choose_threshold(&positives, n_tokens, model.k)?;
    model.theta = Some(theta);
    Ok(theta)
}

/// `desc` holds every positive pre-activation sorted descending.
fn choose_threshold(desc: &[f64], n_tokens: usize, k: usize) -> Result<f64> {
    let t = n_tokens as f64;
    if k == 0 {
        return Ok(desc.first().copied().unwrap_or(0.0));
    }
    let target = k as f64;
    // active count at θ is the number of entries strictly above θ
    let above = |theta: f64| desc.partition_point(|&v| v > theta) as f64 / t;
    let at_zero = desc.len() as f64 / t;
    if at_zero < target * (1.0 - CALIBRATION_TOLERANCE) {
        return Err(Error::CalibrationUnattainable {
            target: k,
            achievable: at_zero,
        });
    }
    // bisect over candidate thresholds {0} ∪ desc, ascending in θ, for the
    // smallest one whose count does not exceed the target
    let candidate = |i: usize| if i == 0 { 0.0 } else { desc[desc.len() - i] };
    if above(0.0) <= target {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0usize, desc.len());
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if above(candidate(mid)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (below, over) = (above(candidate(hi)), above(candidate(lo)));
    let (theta, achieved) = if over - target < target - below {
        (candidate(lo), over)
    } else {
        (candidate(hi), below)
    };
    if ((achieved - target) / target).abs() > CALIBRATION_TOLERANCE + 1e-12 {
        return Err(Error::CalibrationUnattainable {
            target: k,
            achievable: achieved,
        });
    }
    Ok(theta)
}
