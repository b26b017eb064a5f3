//! Attack evaluation metrics.
//!
//! Scores follow one orientation everywhere: a higher score means "more
//! likely positive" (member, peak). ROC thresholds predict positive when
//! `score >= threshold`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MaskSpec;
use crate::error::{Error, Result};
use crate::signal_math::PeakSet;

/// A scored sample with its ground-truth label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub id: String,
    pub score: f64,
    pub label: bool,
}

impl LabeledScore {
    pub fn new(id: impl Into<String>, score: f64, label: bool) -> Self {
        Self {
            id: id.into(),
            score,
            label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// Operating points ordered from the strictest threshold (`+inf`, nothing
/// flagged) to the loosest (everything flagged).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub thresholds: Vec<f64>,
}

/// `ceil(q * n)` with a guard against floating-point overshoot, clamped to
/// `[1, n]` for non-empty inputs.
pub fn top_fraction_count(q: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (q * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

fn check_fraction(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("fraction {q} outside (0, 1]")));
    }
    Ok(())
}

/// Sweeps a threshold over the distinct scores; tied scores move together.
pub fn roc_curve(scores: &[LabeledScore]) -> Result<RocCurve> {
    if scores.iter().any(|s| s.score.is_nan()) {
        return Err(Error::DegenerateInput("NaN score".into()));
    }
    let positives = scores.iter().filter(|s| s.label).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{positives} positives and {negatives} negatives; both classes are required"
        )));
    }
    let mut sorted: Vec<&LabeledScore> = scores.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
        thresholds.push(threshold);
    }
    Ok(RocCurve { points, thresholds })
}

/// Trapezoidal area under the curve.
pub fn auroc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Best TPR among operating points whose FPR does not exceed `fpr_cap`;
/// points are never interpolated.
pub fn tpr_at_fpr(curve: &RocCurve, fpr_cap: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.fpr <= fpr_cap + 1e-12)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

/// TPR when exactly the `ceil(q * N)` highest scores are flagged, ties
/// broken by ascending id.
pub fn tpr_at_top_fraction(scores: &[LabeledScore], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_fraction(q)?;
    let positives = scores.iter().filter(|s| s.label).count();
    if positives == 0 {
        return Err(Error::DegenerateLabels("no positives to recover".into()));
    }
    let mut sorted: Vec<&LabeledScore> = scores.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    let k = top_fraction_count(q, scores.len());
    let tp = sorted[..k].iter().filter(|s| s.label).count();
    Ok(tp as f64 / positives as f64)
}

/// Mean and sample standard deviation (divisor `N - 1`); a single value has
/// standard deviation 0. `None` for an empty slice.
pub fn mean_and_sample_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// One flag per timestamp of `window`: set when a peak lies within `tau`.
pub fn pointwise_classify(peaks: &PeakSet, window: MaskSpec, tau: usize) -> Vec<bool> {
    window
        .range()
        .map(|t| peaks.iter().any(|p| p.abs_diff(t) <= tau))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Pointwise confusion counts over every timestamp of `window`.
pub fn peak_confusion(gt: &PeakSet, pred: &PeakSet, window: MaskSpec, tau: usize) -> ConfusionCounts {
    let truth = pointwise_classify(gt, window, tau);
    let guess = pointwise_classify(pred, window, tau);
    let mut c = ConfusionCounts::default();
    for (&g, &p) in truth.iter().zip(&guess) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// `None` marks a 0/0 ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl PrecisionRecall {
    pub fn is_degenerate(&self) -> bool {
        self.precision.is_none()
    }
}

pub fn precision_recall(c: &ConfusionCounts) -> PrecisionRecall {
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    PrecisionRecall {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    ExactPermutation,
    SampledPermutation,
    StudentT,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub method: PValueMethod,
}

/// Largest sample size for which [`pearson`] enumerates every permutation.
pub const EXACT_PERMUTATION_MAX_N: usize = 9;

struct Centered {
    x: Vec<f64>,
    y: Vec<f64>,
    sxx: f64,
    syy: f64,
}

fn center(x: &[f64], y: &[f64]) -> Result<Centered> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "correlation over lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Shape(format!(
            "correlation needs at least 3 pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite value in correlation input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sxx: f64 = xc.iter().map(|v| v * v).sum();
    let syy: f64 = yc.iter().map(|v| v * v).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("zero variance in correlation input".into()));
    }
    Ok(Centered {
        x: xc,
        y: yc,
        sxx,
        syy,
    })
}

fn cross(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Pearson's r with a two-sided p-value: exact permutation test for
/// `n <= 9`, otherwise the Student-t tail with `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    let c = center(x, y)?;
    let r = (cross(&c.x, &c.y) / (c.sxx * c.syy).sqrt()).clamp(-1.0, 1.0);
    let (p_value, method) = if x.len() <= EXACT_PERMUTATION_MAX_N {
        (exact_permutation_p(&c), PValueMethod::ExactPermutation)
    } else {
        (student_t_p_value(r, x.len()), PValueMethod::StudentT)
    };
    Ok(Correlation { r, p_value, method })
}

/// Two-sided p-value of `r` from the t distribution with `n - 2` degrees of
/// freedom, via the regularized incomplete beta function.
pub fn student_t_p_value(r: f64, n: usize) -> f64 {
    let dof = (n - 2) as f64;
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    let t2 = r2 * dof / (1.0 - r2);
    statrs::function::beta::beta_reg(dof / 2.0, 0.5, dof / (dof + t2)).clamp(0.0, 1.0)
}

// relative slack when comparing permuted statistics to the observed one
const PERM_TOL: f64 = 1e-12;

fn exact_permutation_p(c: &Centered) -> f64 {
    let observed = cross(&c.x, &c.y).abs();
    let cutoff = observed - PERM_TOL * (c.sxx * c.syy).sqrt();
    let mut y = c.y.clone();
    let n = y.len();
    let (mut hits, mut total) = (0u64, 0u64);
    let mut count = |y: &[f64]| {
        total += 1;
        if cross(&c.x, y).abs() >= cutoff {
            hits += 1;
        }
    };
    // Heap's algorithm, iterative form
    let mut stack = vec![0usize; n];
    count(&y);
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                y.swap(0, i);
            } else {
                y.swap(stack[i], i);
            }
            count(&y);
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Two-sided Monte Carlo permutation p-value with `n_permutations` seeded
/// shuffles, using the `(hits + 1) / (n_permutations + 1)` estimator.
pub fn sampled_permutation_p_value(
    x: &[f64],
    y: &[f64],
    n_permutations: usize,
    seed: u64,
) -> Result<f64> {
    let c = center(x, y)?;
    let observed = cross(&c.x, &c.y).abs();
    let cutoff = observed - PERM_TOL * (c.sxx * c.syy).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = c.y.clone();
    let mut hits = 0usize;
    for _ in 0..n_permutations {
        y.shuffle(&mut rng);
        if cross(&c.x, &y).abs() >= cutoff {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (n_permutations + 1) as f64)
}

/// Exact permutation p-value over all `n!` orderings.
pub fn exact_permutation_p_value(x: &[f64], y: &[f64]) -> Result<f64> {
    let c = center(x, y)?;
    if x.len() > 10 {
        return Err(Error::Config(format!(
            "exact permutation test over {}! orderings is too large",
            x.len()
        )));
    }
    Ok(exact_permutation_p(&c))
}
