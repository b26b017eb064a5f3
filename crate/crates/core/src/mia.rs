//! Loss-ratio membership inference (LBRM) and the naive loss baseline.
//!
//! A suspect series is masked, reconstructed by the target and by a reference
//! model, and scored by `R = L_T / L_R` where each loss is the DTW distance
//! between the reconstruction and the original. A small ratio means the target
//! reconstructs the series unusually well, so `R <= theta` flags a member.
//! Whenever a "higher is more member-like" score is needed, `-R` is used.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{apply_mask, normalize_masks, MaskSpec, TimeSeriesRecord};
use crate::error::{Error, Result};
use crate::imputers::{impute, Imputer};
use crate::metrics::{mean_and_sample_std, top_fraction_count};
use crate::signal_math::{dtw_distance, DtwConfig};

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Which positions enter the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    #[default]
    FullSeries,
    MaskedWindow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbrmConfig {
    pub dtw: DtwConfig,
    pub scope: LossScope,
    /// Reference losses below this make the ratio undefined.
    pub epsilon: f64,
}

impl Default for LbrmConfig {
    fn default() -> Self {
        Self {
            dtw: DtwConfig::default(),
            scope: LossScope::FullSeries,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipScore {
    pub series_id: String,
    pub loss_target: f64,
    pub loss_reference: f64,
    pub ratio: f64,
    pub mask_used: MaskSpec,
}

impl MembershipScore {
    /// ROC orientation: higher means more member-like.
    pub fn score(&self) -> f64 {
        -self.ratio
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    Nonmember = 0,
    Member = 1,
}

impl Membership {
    pub fn is_member(self) -> bool {
        self == Membership::Member
    }
}

/// `l_target / l_reference`, refusing references below `epsilon`.
pub fn loss_ratio(l_target: f64, l_reference: f64, epsilon: f64) -> Option<f64> {
    (l_reference >= epsilon).then(|| l_target / l_reference)
}

/// DTW loss of `model` on `x` with `masks` removed from the query.
///
/// Positions inside `hidden` are masked in the query as well but are dropped
/// from both sequences before the loss is taken, so the loss only covers what
/// the attacker can observe.
fn reconstruction_loss(
    model: &dyn Imputer,
    x: &TimeSeriesRecord,
    mask: MaskSpec,
    hidden: Option<MaskSpec>,
    cfg: &LbrmConfig,
) -> Result<f64> {
    let mut masks = vec![mask];
    masks.extend(hidden);
    let masks = normalize_masks(&masks, x.len())?;
    let masked = apply_mask(x, &masks)?;
    let y = impute(model, &masked)?;

    let keep = |t: &usize| hidden.is_none_or(|h| !h.contains(*t));
    let positions: Vec<usize> = match cfg.scope {
        LossScope::FullSeries => (0..x.len()).filter(keep).collect(),
        LossScope::MaskedWindow => mask.range().filter(keep).collect(),
    };
    if positions.is_empty() {
        return Err(Error::Mask("loss region is entirely hidden".into()));
    }
    let pred: Vec<f64> = positions.iter().map(|&t| y[t]).collect();
    let truth: Vec<f64> = positions.iter().map(|&t| x.values[t]).collect();
    dtw_distance(&pred, &truth, &cfg.dtw)
}

/// LBRM score of one suspect series under one mask.
pub fn lbrm_score(
    target: &dyn Imputer,
    reference: &dyn Imputer,
    x: &TimeSeriesRecord,
    mask: MaskSpec,
    cfg: &LbrmConfig,
) -> Result<MembershipScore> {
    lbrm_score_hiding(target, reference, x, mask, None, cfg)
}

/// [`lbrm_score`] when the region `hidden` is unknown to the attacker: it is
/// masked in both queries and excluded from both losses.
pub fn lbrm_score_hiding(
    target: &dyn Imputer,
    reference: &dyn Imputer,
    x: &TimeSeriesRecord,
    mask: MaskSpec,
    hidden: Option<MaskSpec>,
    cfg: &LbrmConfig,
) -> Result<MembershipScore> {
    let loss_target = reconstruction_loss(target, x, mask, hidden, cfg)?;
    let loss_reference = reconstruction_loss(reference, x, mask, hidden, cfg)?;
    let ratio = loss_ratio(loss_target, loss_reference, cfg.epsilon).ok_or_else(|| {
        Error::DegenerateReference {
            series_id: x.id.clone(),
            loss_reference,
        }
    })?;
    Ok(MembershipScore {
        series_id: x.id.clone(),
        loss_target,
        loss_reference,
        ratio,
        mask_used: mask,
    })
}

/// The target loss alone; lower is more member-like.
pub fn naive_loss_score(
    target: &dyn Imputer,
    x: &TimeSeriesRecord,
    mask: MaskSpec,
    cfg: &LbrmConfig,
) -> Result<f64> {
    reconstruction_loss(target, x, mask, None, cfg)
}

/// How the decision threshold on `R` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Mean plus `n_sigmas` sample standard deviations of non-member ratios.
    MeanStd { n_sigmas: f64 },
    /// Flag exactly `ceil(q * N)` suspects with the smallest ratios.
    TopFraction { q: f64 },
    Fixed { value: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::TopFraction { q: 0.25 }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    /// `top:Q`, `mean_std:N` or `fixed:V`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("threshold policy {s:?} is not KIND:VALUE")))?;
        let v: f64 = arg
            .parse()
            .map_err(|_| Error::Config(format!("threshold value {arg:?} is not a number")))?;
        let policy = match kind {
            "top" | "top_fraction" => ThresholdPolicy::TopFraction { q: v },
            "mean_std" | "meanstd" => ThresholdPolicy::MeanStd { n_sigmas: v },
            "fixed" => ThresholdPolicy::Fixed { value: v },
            other => return Err(Error::Config(format!("unknown threshold policy {other:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::MeanStd { n_sigmas } if !n_sigmas.is_finite() => {
                Err(Error::Config("n_sigmas must be finite".into()))
            }
            ThresholdPolicy::TopFraction { q } if !(q > 0.0 && q <= 1.0) => {
                Err(Error::Config(format!("top fraction {q} outside (0, 1]")))
            }
            ThresholdPolicy::Fixed { value } if !value.is_finite() => {
                Err(Error::Config("fixed threshold must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Threshold `theta` on the ratio.
///
/// For `mean_std` the scores are non-member ratios; for `top_fraction` they
/// are the suspect ratios themselves and `theta` is the `ceil(q * N)`-th
/// smallest. Ties at `theta` can admit more than `ceil(q * N)` suspects under
/// `R <= theta`; [`decide`] truncates them by id.
pub fn calibrate_threshold(scores: &[f64], policy: &ThresholdPolicy) -> Result<f64> {
    policy.validate()?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("non-finite calibration score".into()));
    }
    match *policy {
        ThresholdPolicy::MeanStd { n_sigmas } => {
            if scores.len() < 2 {
                return Err(Error::Calibration(format!(
                    "mean_std needs at least 2 scores, got {}",
                    scores.len()
                )));
            }
            let (mean, std) = mean_and_sample_std(scores).expect("checked non-empty");
            Ok(mean + n_sigmas * std)
        }
        ThresholdPolicy::TopFraction { q } => {
            if scores.is_empty() {
                return Err(Error::Calibration("top_fraction needs at least 1 score".into()));
            }
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            Ok(sorted[top_fraction_count(q, sorted.len()) - 1])
        }
        ThresholdPolicy::Fixed { value } => Ok(value),
    }
}

/// Member iff `ratio <= theta`.
pub fn classify_membership(score: &MembershipScore, theta: f64) -> Membership {
    if score.ratio <= theta {
        Membership::Member
    } else {
        Membership::Nonmember
    }
}

/// Indices of `scores` sorted by ascending ratio, ties by id.
pub fn rank_by_ratio(scores: &[MembershipScore]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .ratio
            .total_cmp(&scores[b].ratio)
            .then_with(|| scores[a].series_id.cmp(&scores[b].series_id))
    });
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decisions {
    pub theta: f64,
    /// Aligned with the input scores.
    pub decisions: Vec<Membership>,
}

/// Applies `policy` to a suspect set. `nonmember_ratios` calibrates
/// `mean_std` and is ignored otherwise.
pub fn decide(
    scores: &[MembershipScore],
    policy: &ThresholdPolicy,
    nonmember_ratios: &[f64],
) -> Result<Decisions> {
    match *policy {
        ThresholdPolicy::TopFraction { q } => {
            let ratios: Vec<f64> = scores.iter().map(|s| s.ratio).collect();
            let theta = calibrate_threshold(&ratios, policy)?;
            let k = top_fraction_count(q, scores.len());
            let mut decisions = vec![Membership::Nonmember; scores.len()];
            for &i in &rank_by_ratio(scores)[..k] {
                decisions[i] = Membership::Member;
            }
            Ok(Decisions { theta, decisions })
        }
        _ => {
            let theta = calibrate_threshold(nonmember_ratios, policy)?;
            let decisions = scores.iter().map(|s| classify_membership(s, theta)).collect();
            Ok(Decisions { theta, decisions })
        }
    }
}

pub const SCORE_CSV_HEADER: [&str; 7] = [
    "series_id",
    "loss_target",
    "loss_reference",
    "ratio",
    "mask_start",
    "mask_width",
    "label",
];

/// Writes the score file; `labels`, when given, is aligned with `scores`.
pub fn write_scores_to<W: Write>(
    writer: W,
    scores: &[MembershipScore],
    labels: Option<&[Option<bool>]>,
) -> Result<()> {
    if labels.is_some_and(|l| l.len() != scores.len()) {
        return Err(Error::Shape("labels are not aligned with scores".into()));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(SCORE_CSV_HEADER)?;
    for (i, s) in scores.iter().enumerate() {
        let label = match labels.and_then(|l| l[i]) {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        w.write_record([
            s.series_id.clone(),
            s.loss_target.to_string(),
            s.loss_reference.to_string(),
            s.ratio.to_string(),
            s.mask_used.start.to_string(),
            s.mask_used.width.to_string(),
            label.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<score csv>", e))?;
    Ok(())
}

pub fn write_scores(
    path: impl AsRef<Path>,
    scores: &[MembershipScore],
    labels: Option<&[Option<bool>]>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scores_to(std::io::BufWriter::new(file), scores, labels)
}
