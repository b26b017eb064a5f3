//! Numerical kernels shared by the attacks: DTW reconstruction loss, MAE,
//! the Ricker continuous wavelet transform and ridge-line peak detection.

mod cwt;
mod dtw;

pub use cwt::{cwt, detect_peaks_cwt, ricker, CwtConfig, PeakSet, Scalogram, Wavelet};
pub use dtw::{dtw_distance, DtwConfig, PointwiseDistance};

use crate::error::{Error, Result};

/// Mean absolute error between two equal-length, non-empty sequences.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "mae over sequences of length {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("mae over empty sequences".into()));
    }
    let total: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.len() as f64)
}

/// Linear-interpolated percentile, `p` in `[0, 100]`, matching the default
/// interpolation of numpy's `percentile`.
pub(crate) fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
