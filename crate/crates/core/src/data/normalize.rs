use super::volume::Volume;
use crate::error::{Error, Result};

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// `(exp(gamma * v) - 1) / (exp(gamma) - 1)`, the identity at `gamma == 0`.
pub fn contrast_map(v: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        v
    } else {
        (gamma * v).exp_m1() / gamma.exp_m1()
    }
}

/// Scales by the 99th percentile, clips to `[0, 1]`, then applies
/// [`contrast_map`].
pub fn normalize_intensity(volume: &Volume, gamma: f64) -> Result<Volume> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    let data = volume.data();
    let first = data[0];
    if data.iter().all(|&v| v == first) {
        return Err(Error::InvalidArgument("cannot normalize a constant volume".into()));
    }
    let p99 = percentile(data, 99.0);
    if !(p99 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "99th percentile intensity must be positive, got {p99}"
        )));
    }
    let out = data
        .iter()
        .map(|&v| contrast_map((v / p99).clamp(0.0, 1.0), gamma))
        .collect();
    Ok(Volume::new(volume.shape(), out)?.with_spacing(volume.spacing()))
}
