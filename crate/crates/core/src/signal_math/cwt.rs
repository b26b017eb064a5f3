//! Ricker-wavelet CWT and ridge-line peak detection.
//!
//! The detector follows the classic ridge-line scheme: relative maxima of the
//! coefficient matrix are linked from the coarsest scale down to the finest,
//! a ridge may skip at most `gap_threshold` scales, and surviving ridges are
//! filtered by length and by their signal-to-noise ratio at the finest scale.
//! Kernel lengths, link distances and the noise window follow the conventions
//! of `scipy.signal.find_peaks_cwt`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::percentile;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wavelet {
    /// Mexican hat, `(1 - u^2) exp(-u^2 / 2)`, unit L2 norm per scale.
    #[default]
    Ricker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CwtConfig {
    /// Strictly increasing positive scales.
    pub widths: Vec<f64>,
    pub wavelet: Wavelet,
    pub min_snr: f64,
    /// Number of consecutive scales a ridge may miss before it stops growing.
    pub gap_threshold: usize,
    /// Minimum ridge length as a fraction of the number of scales.
    pub min_ridge_length_fraction: f64,
    pub noise_percentile: f64,
}

impl Default for CwtConfig {
    fn default() -> Self {
        Self::with_widths(vec![1.0, 2.0, 3.0, 4.0])
    }
}

impl CwtConfig {
    /// Default detector settings for the given scales; the gap threshold is
    /// `ceil(widths[0])`.
    pub fn with_widths(widths: Vec<f64>) -> Self {
        let gap_threshold = widths.first().map_or(1, |w| w.ceil().max(1.0) as usize);
        Self {
            widths,
            wavelet: Wavelet::Ricker,
            min_snr: 1.0,
            gap_threshold,
            min_ridge_length_fraction: 0.25,
            noise_percentile: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("at least one CWT width is required".into()));
        }
        if self.widths.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("CWT widths must be positive".into()));
        }
        if self.widths.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("CWT widths must be strictly increasing".into()));
        }
        if self.min_snr.is_nan() || self.min_snr <= 0.0 {
            return Err(Error::Config("min_snr must be positive".into()));
        }
        if self.gap_threshold == 0 {
            return Err(Error::Config("gap_threshold must be positive".into()));
        }
        if !(self.min_ridge_length_fraction > 0.0 && self.min_ridge_length_fraction <= 1.0) {
            return Err(Error::Config(
                "min_ridge_length_fraction must lie in (0, 1]".into(),
            ));
        }
        if !(self.noise_percentile > 0.0 && self.noise_percentile < 100.0) {
            return Err(Error::Config("noise_percentile must lie in (0, 100)".into()));
        }
        Ok(())
    }

    fn max_width(&self) -> f64 {
        self.widths.iter().copied().fold(0.0, f64::max)
    }
}

/// `points` samples of the Ricker wavelet at scale `a`, centred on the middle
/// of the sample range.
pub fn ricker(points: usize, a: f64) -> Vec<f64> {
    let amp = 2.0 / ((3.0 * a).sqrt() * std::f64::consts::PI.powf(0.25));
    let wsq = a * a;
    let centre = (points as f64 - 1.0) / 2.0;
    (0..points)
        .map(|i| {
            let x = i as f64 - centre;
            let xsq = x * x;
            amp * (1.0 - xsq / wsq) * (-xsq / (2.0 * wsq)).exp()
        })
        .collect()
}

/// CWT coefficients, one row per scale, each row as long as the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Scalogram {
    pub widths: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl Scalogram {
    pub fn n_scales(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Continuous wavelet transform of `x`.
///
/// Row `k` is the same-length correlation of `x` with the wavelet at scale
/// `widths[k]`, with zeros assumed outside the sequence. See [`kernel_points`]
/// for the wavelet support.
pub fn cwt(x: &[f64], cfg: &CwtConfig) -> Result<Scalogram> {
    cfg.validate()?;
    let max_width = cfg.max_width().ceil() as usize;
    if x.is_empty() || x.len() < max_width {
        return Err(Error::Shape(format!(
            "sequence of length {} is shorter than the largest width {max_width}",
            x.len()
        )));
    }
    let n = x.len();
    let rows = cfg
        .widths
        .iter()
        .map(|&a| {
            let points = kernel_points(a, n);
            let kernel = match cfg.wavelet {
                Wavelet::Ricker => ricker(points, a),
            };
            correlate_same(x, &kernel)
        })
        .collect();
    Ok(Scalogram {
        widths: cfg.widths.clone(),
        rows,
    })
}

/// Number of wavelet samples used at scale `a` for a sequence of length `n`.
///
/// The support covers `ceil(5a)` samples on each side of the centre, clipped
/// to `n - 1`. The count is always odd so that coefficient `b` is centred
/// exactly on sample `b`.
pub fn kernel_points(a: f64, n: usize) -> usize {
    let half = ((5.0 * a).ceil() as usize).min(n.saturating_sub(1));
    2 * half + 1
}

/// Same-length convolution of `x` with the reversed kernel (a correlation),
/// keeping the centred slice of the full output as `mode='same'` does.
fn correlate_same(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    let m = kernel.len() as isize;
    // output i sits at full-convolution index i + (m - 1) / 2
    let offset = m - 1 - (m - 1) / 2;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..m {
                let j = i - offset + k;
                if (0..n).contains(&j) {
                    acc += x[j as usize] * kernel[k as usize];
                }
            }
            acc
        })
        .collect()
}

/// Detected peak positions, sorted and without duplicates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeakSet {
    indices: BTreeSet<usize>,
}

impl PeakSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.indices.contains(&t)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn insert(&mut self, t: usize) -> bool {
        self.indices.insert(t)
    }

    /// Moves every index by `offset`, e.g. from window-relative to series
    /// positions.
    pub fn shifted(&self, offset: usize) -> PeakSet {
        self.iter().map(|t| t + offset).collect()
    }

    pub fn first(&self) -> Option<usize> {
        self.indices.first().copied()
    }

    pub fn last(&self) -> Option<usize> {
        self.indices.last().copied()
    }
}

impl FromIterator<usize> for PeakSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self {
            indices: iter.into_iter().collect(),
        }
    }
}

impl<const N: usize> From<[usize; N]> for PeakSet {
    fn from(v: [usize; N]) -> Self {
        v.into_iter().collect()
    }
}

/// [`cwt`] of `x` extended on both sides by copies of its end values, cropped
/// back to the positions of `x`.
fn cwt_edge_extended(x: &[f64], cfg: &CwtConfig) -> Result<Scalogram> {
    let pad = (5.0 * cfg.max_width()).ceil() as usize;
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend(std::iter::repeat_n(x[0], pad));
    ext.extend_from_slice(x);
    ext.extend(std::iter::repeat_n(x[n - 1], pad));
    let mut s = cwt(&ext, cfg)?;
    for row in &mut s.rows {
        *row = row[pad..pad + n].to_vec();
    }
    Ok(s)
}

#[derive(Debug)]
struct Ridge {
    // rows are appended coarse to fine, so the last entry is the finest scale
    rows: Vec<usize>,
    cols: Vec<usize>,
    gap: usize,
}

/// Strict relative maxima along a row; the two end points never qualify.
fn relative_maxima(row: &[f64]) -> Vec<usize> {
    (1..row.len().saturating_sub(1))
        .filter(|&i| row[i] > row[i - 1] && row[i] > row[i + 1])
        .collect()
}

fn identify_ridge_lines(scalogram: &Scalogram, gap_threshold: usize) -> Vec<Ridge> {
    let maxima: Vec<Vec<usize>> = scalogram.rows.iter().map(|r| relative_maxima(r)).collect();
    let Some(start_row) = maxima.iter().rposition(|m| !m.is_empty()) else {
        return Vec::new();
    };
    let max_distances: Vec<f64> = scalogram.widths.iter().map(|w| w / 4.0).collect();

    let mut active: Vec<Ridge> = maxima[start_row]
        .iter()
        .map(|&col| Ridge {
            rows: vec![start_row],
            cols: vec![col],
            gap: 0,
        })
        .collect();
    let mut finished = Vec::new();

    for row in (0..start_row).rev() {
        for ridge in &mut active {
            ridge.gap += 1;
        }
        let prev_cols: Vec<usize> = active.iter().map(|r| *r.cols.last().unwrap()).collect();
        for &col in &maxima[row] {
            let closest = prev_cols
                .iter()
                .enumerate()
                .map(|(i, &c)| (i, col.abs_diff(c)))
                .min_by_key(|&(i, d)| (d, i));
            match closest {
                Some((i, d)) if d as f64 <= max_distances[row] => {
                    let ridge = &mut active[i];
                    ridge.rows.push(row);
                    ridge.cols.push(col);
                    ridge.gap = 0;
                }
                _ => active.push(Ridge {
                    rows: vec![row],
                    cols: vec![col],
                    gap: 0,
                }),
            }
        }
        let (done, keep): (Vec<Ridge>, Vec<Ridge>) =
            active.into_iter().partition(|r| r.gap > gap_threshold);
        finished.extend(done);
        active = keep;
    }
    finished.extend(active);
    finished
}

/// Peak indices (relative to `x`) found by ridge lines through the CWT.
///
/// Unlike [`cwt`], the sequence is extended with its end values rather than
/// zeros, so a baseline level does not meet the padding as a step and a
/// constant input has no peaks. A ridge is kept when it spans at
/// least `ceil(min_ridge_length_fraction * |widths|)` scales and its
/// finest-scale coefficient is at least `min_snr` times the local noise,
/// taken as the `noise_percentile` of absolute finest-scale coefficients over
/// a window of `ceil(len / 20)` samples. Each kept ridge reports its position
/// at the finest scale it reaches.
pub fn detect_peaks_cwt(x: &[f64], cfg: &CwtConfig) -> Result<PeakSet> {
    cfg.validate()?;
    let needed = (2.0 * cfg.max_width()).ceil() as usize;
    if x.len() < needed {
        return Err(Error::Shape(format!(
            "peak detection needs at least {needed} samples, got {}",
            x.len()
        )));
    }
    let scalogram = cwt_edge_extended(x, cfg)?;
    let ridges = identify_ridge_lines(&scalogram, cfg.gap_threshold);

    let n = scalogram.len();
    let min_length = (cfg.min_ridge_length_fraction * scalogram.n_scales() as f64).ceil() as usize;
    let window = (n as f64 / 20.0).ceil() as usize;
    let (half, odd) = (window / 2, window % 2);
    let finest: Vec<f64> = scalogram.rows[0].iter().map(|v| v.abs()).collect();
    let noise: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + odd).min(n);
            percentile(&finest[lo..hi], cfg.noise_percentile)
        })
        .collect();

    let peaks = ridges
        .into_iter()
        .filter(|ridge| {
            if ridge.rows.len() < min_length {
                return false;
            }
            let row = *ridge.rows.last().unwrap();
            let col = *ridge.cols.last().unwrap();
            let coef = scalogram.rows[row][col].abs();
            let snr = if noise[col] > 0.0 {
                coef / noise[col]
            } else if coef > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            snr >= cfg.min_snr
        })
        .map(|ridge| *ridge.cols.last().unwrap())
        .collect();
    Ok(peaks)
}
