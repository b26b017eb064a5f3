//! Sliding-window attribute inference: every window of a series is masked in
//! turn, the model fills it in, and peaks detected in the reconstruction are
//! scored against peaks detected in the true values of the same window.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{apply_mask, MaskSpec, TimeSeriesRecord};
use crate::error::{Error, Result};
use crate::imputers::{impute, Imputer};
use crate::metrics::{mean_and_sample_std, peak_confusion, precision_recall, ConfusionCounts};
use crate::parallel::{ordered_map, Workers};
use crate::signal_math::{detect_peaks_cwt, CwtConfig, PeakSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AiaConfig {
    pub window: usize,
    pub stride: usize,
    /// A predicted peak matches timestamps within this many steps.
    pub tolerance: usize,
    pub cwt: CwtConfig,
}

impl Default for AiaConfig {
    fn default() -> Self {
        Self {
            window: 24,
            stride: 24,
            tolerance: 2,
            cwt: CwtConfig::default(),
        }
    }
}

impl AiaConfig {
    pub fn validate(&self) -> Result<()> {
        self.cwt.validate()?;
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let needed = (2.0 * self.cwt.widths.iter().copied().fold(0.0, f64::max)).ceil() as usize;
        if self.window < needed.max(1) {
            return Err(Error::Config(format!(
                "window {} is shorter than the {needed} samples the peak detector needs",
                self.window
            )));
        }
        Ok(())
    }
}

/// Windows `[t, t + W)` for `t = 0, S, 2S, ...` that fit inside `len`.
pub fn sliding_windows(len: usize, cfg: &AiaConfig) -> Result<Vec<MaskSpec>> {
    if cfg.window == 0 || cfg.stride == 0 {
        return Err(Error::Config("window and stride must be at least 1".into()));
    }
    if cfg.window > len {
        return Err(Error::Config(format!(
            "window {} is longer than the series ({len})",
            cfg.window
        )));
    }
    Ok((0..=len - cfg.window)
        .step_by(cfg.stride)
        .map(|t| MaskSpec::new(t, cfg.window))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub series_id: String,
    pub window: MaskSpec,
    /// Absolute positions in the series.
    pub gt_peaks: PeakSet,
    pub pred_peaks: PeakSet,
    pub confusion: ConfusionCounts,
    /// `None` when nothing was predicted.
    pub precision: Option<f64>,
    /// `None` when the window holds no true peak.
    pub recall: Option<f64>,
}

impl WindowResult {
    pub fn is_degenerate(&self) -> bool {
        self.precision.is_none()
    }
}

/// Masks `window` of `x`, asks `model` to fill it and compares the peaks of
/// both versions of the window.
pub fn attack_window(
    model: &dyn Imputer,
    x: &TimeSeriesRecord,
    window: MaskSpec,
    cfg: &AiaConfig,
) -> Result<WindowResult> {
    let masked = apply_mask(x, &[window])?;
    let y = impute(model, &masked)?;
    let gt_peaks = detect_peaks_cwt(&x.values[window.range()], &cfg.cwt)?.shifted(window.start);
    let pred_peaks = detect_peaks_cwt(&y[window.range()], &cfg.cwt)?.shifted(window.start);
    let confusion = peak_confusion(&gt_peaks, &pred_peaks, window, cfg.tolerance);
    let pr = precision_recall(&confusion);
    Ok(WindowResult {
        series_id: x.id.clone(),
        window,
        gt_peaks,
        pred_peaks,
        confusion,
        precision: pr.precision,
        recall: pr.recall,
    })
}

/// Every sliding window of every series, in series then window order.
pub fn attack_all_windows(
    model: &dyn Imputer,
    data: &[TimeSeriesRecord],
    cfg: &AiaConfig,
    workers: Workers,
) -> Result<Vec<WindowResult>> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    for (i, x) in data.iter().enumerate() {
        for w in sliding_windows(x.len(), cfg)? {
            tasks.push((i, w));
        }
    }
    ordered_map(&tasks, workers, |&(i, w)| attack_window(model, &data[i], w, cfg))?
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AiaAggregate {
    pub precision_mean: Option<f64>,
    pub precision_std: Option<f64>,
    pub recall_mean: Option<f64>,
    pub recall_std: Option<f64>,
    pub n_windows: usize,
    /// Windows without any predicted peak.
    pub precision_excluded: usize,
    /// Windows without any true peak.
    pub recall_excluded: usize,
    pub pooled: ConfusionCounts,
    #[serde(skip)]
    pub per_window: Vec<WindowResult>,
}

/// Means and sample standard deviations over windows, skipping undefined
/// entries of each metric separately.
pub fn summarize(per_window: Vec<WindowResult>) -> AiaAggregate {
    let precisions: Vec<f64> = per_window.iter().filter_map(|w| w.precision).collect();
    let recalls: Vec<f64> = per_window.iter().filter_map(|w| w.recall).collect();
    let (pm, ps) = mean_and_sample_std(&precisions).unzip();
    let (rm, rs) = mean_and_sample_std(&recalls).unzip();
    let pooled = per_window
        .iter()
        .fold(ConfusionCounts::default(), |acc, w| acc + w.confusion);
    AiaAggregate {
        precision_mean: pm,
        precision_std: ps,
        recall_mean: rm,
        recall_std: rs,
        n_windows: per_window.len(),
        precision_excluded: per_window.len() - precisions.len(),
        recall_excluded: per_window.len() - recalls.len(),
        pooled,
        per_window,
    }
}

/// Runs the attack on all windows of `data` and aggregates. Fails when no
/// window produced a precision value.
pub fn run_aia(
    model: &dyn Imputer,
    data: &[TimeSeriesRecord],
    cfg: &AiaConfig,
    workers: Workers,
) -> Result<AiaAggregate> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let agg = summarize(attack_all_windows(model, data, cfg, workers)?);
    if agg.precision_mean.is_none() {
        return Err(Error::DegenerateAggregate(format!(
            "none of {} windows produced a predicted peak",
            agg.n_windows
        )));
    }
    Ok(agg)
}

pub const WINDOW_CSV_HEADER: [&str; 9] = [
    "series_id",
    "window_start",
    "tp",
    "fp",
    "tn",
    "fn",
    "precision",
    "recall",
    "degenerate",
];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_windows_to<W: Write>(writer: W, windows: &[WindowResult]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(WINDOW_CSV_HEADER)?;
    for r in windows {
        let c = r.confusion;
        w.write_record([
            r.series_id.clone(),
            r.window.start.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            opt(r.precision),
            opt(r.recall),
            u8::from(r.is_degenerate()).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<window csv>", e))?;
    Ok(())
}

pub fn write_windows(path: impl AsRef<Path>, windows: &[WindowResult]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_windows_to(std::io::BufWriter::new(file), windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::MaskedSeries;
    use crate::imputers::{ImputerKind, InterpolatingImputer, MemorizingImputer};
    use proptest::prelude::*;

    /// Answers every query with the true series.
    struct Oracle(TimeSeriesRecord);

    impl Imputer for Oracle {
        fn kind(&self) -> ImputerKind {
            ImputerKind::Memorizing
        }

        fn impute(&self, _: &MaskedSeries) -> Result<Vec<f64>> {
            Ok(self.0.values.clone())
        }
    }

    fn bumps(len: usize, centres: &[(f64, f64)]) -> Vec<f64> {
        (0..len)
            .map(|t| {
                centres
                    .iter()
                    .map(|&(c, s)| 3.0 * (-(t as f64 - c).powi(2) / (2.0 * s * s)).exp())
                    .sum::<f64>()
                    + 1.0
            })
            .collect()
    }

    fn window_result(precision: Option<f64>, recall: Option<f64>) -> WindowResult {
        WindowResult {
            series_id: "s".into(),
            window: MaskSpec::new(0, 24),
            gt_peaks: PeakSet::new(),
            pred_peaks: PeakSet::new(),
            confusion: ConfusionCounts::default(),
            precision,
            recall,
        }
    }

    #[test]
    fn window_counts() {
        let cfg = AiaConfig::default();
        assert_eq!(sliding_windows(1440, &cfg).unwrap().len(), 60);
        assert_eq!(sliding_windows(24, &cfg).unwrap(), vec![MaskSpec::new(0, 24)]);
        assert_eq!(
            sliding_windows(50, &cfg).unwrap(),
            vec![MaskSpec::new(0, 24), MaskSpec::new(24, 24)]
        );
        assert!(matches!(sliding_windows(23, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn oracle_model_scores_perfectly() {
        let x = TimeSeriesRecord::new("x", bumps(96, &[(10.0, 2.0), (40.0, 1.5), (60.0, 3.0)]));
        let cfg = AiaConfig::default();
        let results = attack_all_windows(&Oracle(x.clone()), &[x], &cfg, Workers(1)).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert_eq!(r.gt_peaks, r.pred_peaks);
            assert_eq!(r.confusion.total(), 24);
            if !r.gt_peaks.is_empty() {
                assert_eq!((r.precision, r.recall), (Some(1.0), Some(1.0)));
            }
        }
    }

    #[test]
    fn flat_window_is_all_negative() {
        let x = TimeSeriesRecord::new("flat", vec![2.0; 48]);
        let r = attack_window(&InterpolatingImputer, &x, MaskSpec::new(24, 24), &AiaConfig::default()).unwrap();
        assert!(r.gt_peaks.is_empty() && r.pred_peaks.is_empty());
        assert_eq!(r.confusion, ConfusionCounts { tp: 0, fp: 0, tn: 24, fn_: 0 });
        assert!(r.is_degenerate());
        assert_eq!(r.recall, None);
    }

    #[test]
    fn memorized_bump_is_recovered() {
        let member = TimeSeriesRecord::new("m", bumps(72, &[(35.0, 2.0)]));
        let model = MemorizingImputer::new(vec![member.clone()]).unwrap();
        let r = attack_window(&model, &member, MaskSpec::new(24, 24), &AiaConfig::default()).unwrap();
        assert!(r.pred_peaks.iter().any(|p| p.abs_diff(35) <= 1), "{:?}", r.pred_peaks);
        assert_eq!(r.recall, Some(1.0));
    }

    #[test]
    fn interpolation_misses_the_bump() {
        let x = TimeSeriesRecord::new("m", bumps(72, &[(35.0, 2.0)]));
        let r = attack_window(&InterpolatingImputer, &x, MaskSpec::new(24, 24), &AiaConfig::default()).unwrap();
        assert_eq!(r.recall, Some(0.0));
    }

    #[test]
    fn aggregate_arithmetic() {
        let agg = summarize(vec![
            window_result(Some(0.4), Some(1.0)),
            window_result(Some(0.8), Some(1.0)),
            window_result(None, Some(0.0)),
        ]);
        assert!((agg.precision_mean.unwrap() - 0.6).abs() < 1e-12);
        // sqrt(((0.2)^2 + (0.2)^2) / 1)
        assert!((agg.precision_std.unwrap() - 0.08f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.precision_excluded, 1);
        assert!((agg.recall_mean.unwrap() - 2.0 / 3.0).abs() < 1e-12);

        let same = summarize(vec![window_result(Some(0.5), Some(0.5)); 4]);
        assert_eq!((same.precision_std, same.recall_std), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn all_degenerate_is_an_error() {
        let x = TimeSeriesRecord::new("m", bumps(48, &[(12.0, 2.0), (36.0, 2.0)]));
        let err = run_aia(&InterpolatingImputer, &[x], &AiaConfig::default(), Workers(1)).unwrap_err();
        assert!(matches!(err, Error::DegenerateAggregate(_)));
    }

    #[test]
    fn window_csv_layout() {
        let mut r = window_result(None, Some(0.0));
        r.confusion = ConfusionCounts { tp: 0, fp: 0, tn: 19, fn_: 5 };
        let mut buf = Vec::new();
        write_windows_to(&mut buf, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "series_id,window_start,tp,fp,tn,fn,precision,recall,degenerate\ns,0,0,0,19,5,,0,1\n"
        );
    }

    proptest! {
        #[test]
        fn windows_cover_each_step_at_most_ceil_w_over_s(len in 8usize..300, w in 8usize..40, s in 1usize..40) {
            let cfg = AiaConfig { window: w, stride: s, ..AiaConfig::default() };
            prop_assume!(w <= len);
            let windows = sliding_windows(len, &cfg).unwrap();
            prop_assert_eq!(windows.len(), (len - w) / s + 1);
            let mut cover = vec![0usize; len];
            for win in &windows {
                for t in win.range() {
                    cover[t] += 1;
                }
            }
            let bound = w.div_ceil(s);
            prop_assert!(cover.iter().all(|&c| c <= bound));
            if w == s {
                prop_assert!(cover[..windows.len() * w].iter().all(|&c| c == 1));
            }
        }

        #[test]
        fn aggregate_is_order_invariant(
            vals in prop::collection::vec((prop::option::of(0.0f64..=1.0), prop::option::of(0.0f64..=1.0)), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let rows: Vec<WindowResult> = vals.iter().map(|&(p, r)| window_result(p, r)).collect();
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (a, b) = (summarize(rows), summarize(shuffled));
            let close = |u: Option<f64>, v: Option<f64>| match (u, v) {
                (Some(u), Some(v)) => (u - v).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            prop_assert!(close(a.precision_mean, b.precision_mean));
            prop_assert!(close(a.precision_std, b.precision_std));
            prop_assert!(close(a.recall_mean, b.recall_mean));
            prop_assert!(close(a.recall_std, b.recall_std));
        }
    }
}
