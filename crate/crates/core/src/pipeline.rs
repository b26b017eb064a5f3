//! End-to-end audit stages: model parity, membership scoring over a suspect
//! set, risk ranking, and attribute inference on regions the membership
//! attack never saw.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aia::{attack_window, summarize, AiaAggregate, AiaConfig, WindowResult};
use crate::dataset::{
    apply_mask, derive_seed, normalize_masks, random_mask, split_dataset, MaskSpec, Partitions, SplitSpec,
    TimeSeriesRecord,
};
use crate::error::{Error, Result};
use crate::imputers::{impute, Imputer};
use crate::metrics::{
    auroc, pearson, roc_curve, sampled_permutation_p_value, top_fraction_count, tpr_at_fpr, tpr_at_top_fraction,
    LabeledScore, RocCurve,
};
use crate::mia::{decide, lbrm_score, lbrm_score_hiding, rank_by_ratio, Decisions, LbrmConfig, MembershipScore, ThresholdPolicy};
use crate::parallel::{ordered_map, Workers};
use crate::signal_math::mae;

/// Relative MAE gap above which target and reference are flagged as unmatched.
pub const PARITY_TOLERANCE: f64 = 0.25;
pub const DEFAULT_PERMUTATIONS: usize = 100_000;
pub const FPR_CAP: f64 = 0.1;
pub const TOP_FRACTION_METRIC: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Target trained on the private split only.
    Scratch,
    /// Target trained on the public split and then on the private split.
    Finetune,
    /// Generated bump series with known membership.
    Synthetic,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Scenario::Scratch),
            "finetune" => Ok(Scenario::Finetune),
            "synthetic" => Ok(Scenario::Synthetic),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Data roles for a split scenario.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub partitions: Partitions,
    /// Training store of the target.
    pub target_train: Vec<TimeSeriesRecord>,
    /// Training store of the reference (and evaluation) model.
    pub reference_train: Vec<TimeSeriesRecord>,
    /// Private series (members) followed by test series (non-members).
    pub suspects: Vec<TimeSeriesRecord>,
    pub labels: Vec<bool>,
}

pub fn scenario_data(records: &[TimeSeriesRecord], scenario: Scenario, seed: u64) -> Result<ScenarioData> {
    let spec = match scenario {
        Scenario::Scratch => SplitSpec::scratch(seed),
        Scenario::Finetune => SplitSpec::finetune(seed),
        Scenario::Synthetic => {
            return Err(Error::Config("the synthetic scenario does not split a dataset".into()))
        }
    };
    let partitions = split_dataset(records, &spec)?;
    let target_train = match scenario {
        Scenario::Finetune => partitions.public.iter().chain(&partitions.private).cloned().collect(),
        _ => partitions.private.clone(),
    };
    let suspects: Vec<TimeSeriesRecord> = partitions.private.iter().chain(&partitions.test).cloned().collect();
    let labels = (0..suspects.len()).map(|i| i < partitions.private.len()).collect();
    Ok(ScenarioData {
        reference_train: partitions.public.clone(),
        target_train,
        suspects,
        labels,
        partitions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityBlock {
    pub mae_target_train: Option<f64>,
    pub mae_target_test: f64,
    pub mae_reference_train: Option<f64>,
    pub mae_reference_test: f64,
    pub relative_gap: f64,
    pub warning: Option<String>,
}

/// `|mae_t - mae_r| / mae_r`, infinite when only the reference is perfect.
pub fn relative_gap(mae_target: f64, mae_reference: f64) -> f64 {
    let diff = (mae_target - mae_reference).abs();
    if diff == 0.0 {
        0.0
    } else if mae_reference == 0.0 {
        f64::INFINITY
    } else {
        diff / mae_reference
    }
}

pub fn parity_warning(mae_target: f64, mae_reference: f64) -> Option<String> {
    let gap = relative_gap(mae_target, mae_reference);
    (gap > PARITY_TOLERANCE).then(|| {
        format!(
            "target and reference differ in holdout MAE by {:.1}% (target {mae_target:.6}, reference {mae_reference:.6})",
            100.0 * gap
        )
    })
}

/// Masks `ceil(fraction * T)` random single points of every series and
/// returns the pooled MAE of `model` on the masked points.
pub fn masked_point_mae(
    model: &dyn Imputer,
    data: &[TimeSeriesRecord],
    mask_fraction: f64,
    seed: u64,
    workers: Workers,
) -> Result<f64> {
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(Error::Config(format!("mask fraction {mask_fraction} outside (0, 1)")));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_series = ordered_map(data, workers, |x| -> Result<(f64, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("parity/{}", x.id)));
        let k = ((mask_fraction * x.len() as f64).ceil() as usize).clamp(1, x.len());
        let mut points: Vec<usize> = (0..x.len()).collect();
        points.shuffle(&mut rng);
        let masks: Vec<MaskSpec> = points[..k].iter().map(|&t| MaskSpec::new(t, 1)).collect();
        let masks = normalize_masks(&masks, x.len())?;
        let y = impute(model, &apply_mask(x, &masks)?)?;
        let pred: Vec<f64> = masks.iter().map(|m| y[m.start]).collect();
        let truth: Vec<f64> = masks.iter().map(|m| x.values[m.start]).collect();
        Ok((mae(&pred, &truth)? * k as f64, k))
    })?;
    let (mut total, mut count) = (0.0, 0usize);
    for r in per_series {
        let (s, k) = r?;
        total += s;
        count += k;
    }
    Ok(total / count as f64)
}

/// MAE of both models on a held-out set (and optionally on their training
/// sets) under random point masking.
#[allow(clippy::too_many_arguments)]
pub fn parity_check(
    target: &dyn Imputer,
    reference: &dyn Imputer,
    holdout: &[TimeSeriesRecord],
    target_train: Option<&[TimeSeriesRecord]>,
    reference_train: Option<&[TimeSeriesRecord]>,
    mask_fraction: f64,
    seed: u64,
    workers: Workers,
) -> Result<ParityBlock> {
    let mae_target_test = masked_point_mae(target, holdout, mask_fraction, seed, workers)?;
    let mae_reference_test = masked_point_mae(reference, holdout, mask_fraction, seed, workers)?;
    let mae_target_train = target_train
        .map(|d| masked_point_mae(target, d, mask_fraction, seed, workers))
        .transpose()?;
    let mae_reference_train = reference_train
        .filter(|d| !d.is_empty())
        .map(|d| masked_point_mae(reference, d, mask_fraction, seed, workers))
        .transpose()?;
    let warning = parity_warning(mae_target_test, mae_reference_test);
    if let Some(w) = &warning {
        warn!("{w}");
    }
    Ok(ParityBlock {
        mae_target_train,
        mae_target_test,
        mae_reference_train,
        mae_reference_test,
        relative_gap: relative_gap(mae_target_test, mae_reference_test),
        warning,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaConfig {
    pub u_width: usize,
    pub policy: ThresholdPolicy,
    pub lbrm: LbrmConfig,
    pub seed: u64,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            u_width: 48,
            policy: ThresholdPolicy::default(),
            lbrm: LbrmConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub auroc: f64,
    pub tpr_at_0_1: f64,
    pub tpr_at_top25: f64,
    pub roc: RocCurve,
}

impl MetricBlock {
    pub fn from_scores(scores: &[LabeledScore]) -> Result<Self> {
        let roc = roc_curve(scores)?;
        Ok(Self {
            auroc: auroc(&roc),
            tpr_at_0_1: tpr_at_fpr(&roc, FPR_CAP),
            tpr_at_top25: tpr_at_top_fraction(scores, TOP_FRACTION_METRIC)?,
            roc,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub series_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiaOutcome {
    pub scores: Vec<MembershipScore>,
    /// Aligned with `scores` when labels were supplied.
    pub labels: Option<Vec<bool>>,
    pub decisions: Option<Decisions>,
    pub lbrm: Option<MetricBlock>,
    pub naive: Option<MetricBlock>,
    pub excluded: Vec<Exclusion>,
    /// Why a block above is missing.
    pub notes: Vec<String>,
}

fn labeled(ids_scores: impl Iterator<Item = (String, f64)>, labels: &[bool]) -> Vec<LabeledScore> {
    ids_scores
        .zip(labels)
        .map(|((id, s), &l)| LabeledScore::new(id, s, l))
        .collect()
}

/// Scores every suspect under one seeded random mask. Series whose reference
/// loss vanishes are excluded and listed.
pub fn run_mia(
    target: &dyn Imputer,
    reference: &dyn Imputer,
    suspects: &[TimeSeriesRecord],
    labels: Option<&[bool]>,
    cfg: &MiaConfig,
    workers: Workers,
) -> Result<MiaOutcome> {
    if suspects.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.is_some_and(|l| l.len() != suspects.len()) {
        return Err(Error::Shape("labels are not aligned with suspects".into()));
    }
    cfg.policy.validate()?;
    let results = ordered_map(suspects, workers, |x| {
        let mask = random_mask(x, cfg.u_width, derive_seed(cfg.seed, &x.id))?;
        lbrm_score(target, reference, x, mask, &cfg.lbrm)
    })?;

    let mut scores = Vec::new();
    let mut kept_labels = Vec::new();
    let mut excluded = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => {
                scores.push(s);
                if let Some(l) = labels {
                    kept_labels.push(l[i]);
                }
            }
            Err(e @ Error::DegenerateReference { .. }) => {
                warn!("{e}");
                excluded.push(Exclusion {
                    series_id: suspects[i].id.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    info!("scored {} suspects, excluded {}", scores.len(), excluded.len());

    let mut notes = Vec::new();
    let labels = labels.map(|_| kept_labels);
    let nonmember_ratios: Vec<f64> = match &labels {
        Some(l) => scores.iter().zip(l).filter(|(_, &m)| !m).map(|(s, _)| s.ratio).collect(),
        None => Vec::new(),
    };
    let decisions = if scores.is_empty() {
        None
    } else {
        match decide(&scores, &cfg.policy, &nonmember_ratios) {
            Ok(d) => Some(d),
            Err(e @ Error::Calibration(_)) => {
                notes.push(format!("decisions: {e}"));
                None
            }
            Err(e) => return Err(e),
        }
    };

    let (mut lbrm, mut naive) = (None, None);
    if let Some(l) = &labels {
        let lbrm_scores = labeled(scores.iter().map(|s| (s.series_id.clone(), s.score())), l);
        let naive_scores = labeled(scores.iter().map(|s| (s.series_id.clone(), -s.loss_target)), l);
        match (MetricBlock::from_scores(&lbrm_scores), MetricBlock::from_scores(&naive_scores)) {
            (Ok(a), Ok(b)) => {
                lbrm = Some(a);
                naive = Some(b);
            }
            (Err(e), _) | (_, Err(e)) if e.is_degenerate() || matches!(e, Error::EmptyDataset) => {
                notes.push(format!("mia metrics: {e}"));
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(MiaOutcome {
        scores,
        labels,
        decisions,
        lbrm,
        naive,
        excluded,
        notes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSelection {
    pub q: f64,
    /// Ascending ratio, ties by id.
    pub ranked_ids: Vec<String>,
    pub selected_ids: Vec<String>,
}

pub fn select_top_risk(scores: &[MembershipScore], q: f64) -> Result<RiskSelection> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("fraction {q} outside (0, 1]")));
    }
    let ranked_ids: Vec<String> = rank_by_ratio(scores)
        .into_iter()
        .map(|i| scores[i].series_id.clone())
        .collect();
    let selected_ids = ranked_ids[..top_fraction_count(q, scores.len())].to_vec();
    Ok(RiskSelection {
        q,
        ranked_ids,
        selected_ids,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Width of the mask the membership attack uses on the seen region.
    pub u_width: usize,
    pub q: f64,
    pub aia: AiaConfig,
    pub lbrm: LbrmConfig,
    pub seed: u64,
    pub n_permutations: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            u_width: 48,
            q: 0.25,
            aia: AiaConfig::default(),
            lbrm: LbrmConfig::default(),
            seed: 0,
            n_permutations: DEFAULT_PERMUTATIONS,
        }
    }
}

/// Seen mask and unseen window for one series, separated by at least one
/// stride.
pub fn place_regions(len: usize, cfg: &LinkConfig, rng: &mut impl Rng) -> Option<(MaskSpec, MaskSpec)> {
    let (u, w, gap) = (cfg.u_width, cfg.aia.window, cfg.aia.stride);
    if u == 0 || w == 0 || u > len || w > len {
        return None;
    }
    let pairs: Vec<(usize, usize)> = (0..=len - u)
        .flat_map(|s| {
            (0..=len - w)
                .filter(move |&t| t + w + gap <= s || s + u + gap <= t)
                .map(move |t| (s, t))
        })
        .collect();
    if pairs.is_empty() {
        return None;
    }
    let (s, t) = pairs[rng.random_range(0..pairs.len())];
    Some((MaskSpec::new(s, u), MaskSpec::new(t, w)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesLink {
    pub score: MembershipScore,
    pub unseen_window: MaskSpec,
    pub target_window: WindowResult,
    pub eval_window: Option<WindowResult>,
    pub member: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStat {
    pub n: usize,
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    pub p_permutation: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBlock {
    pub precision: CorrelationStat,
    pub recall: CorrelationStat,
}

#[derive(Clone, Debug)]
pub struct LinkOutcome {
    pub links: Vec<SeriesLink>,
    pub skipped: Vec<Exclusion>,
    pub selection: Option<RiskSelection>,
    pub aia_all: AiaAggregate,
    pub aia_topq: AiaAggregate,
    pub aia_eval_all: Option<AiaAggregate>,
    pub aia_eval_topq: Option<AiaAggregate>,
    pub correlation: CorrelationBlock,
}

/// Pearson correlation between `-R` and a per-series metric over the series
/// where the metric is defined.
pub fn correlate(pairs: &[(f64, f64)], n_permutations: usize, seed: u64) -> CorrelationStat {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let empty = |note: String| CorrelationStat {
        n: pairs.len(),
        r: None,
        p_value: None,
        p_permutation: None,
        note: Some(note),
    };
    match pearson(&x, &y) {
        Ok(c) => {
            let p_permutation = if n_permutations > 0 {
                sampled_permutation_p_value(&x, &y, n_permutations, seed).ok()
            } else {
                None
            };
            CorrelationStat {
                n: pairs.len(),
                r: Some(c.r),
                p_value: Some(c.p_value),
                p_permutation,
                note: None,
            }
        }
        Err(e) => empty(e.to_string()),
    }
}

/// Membership scoring on the seen part of each series, then attribute
/// inference on a disjoint unseen window, for all series and for the
/// `ceil(q * N)` most at risk.
#[allow(clippy::too_many_arguments)]
pub fn run_mia_then_aia(
    target: &dyn Imputer,
    reference: &dyn Imputer,
    eval_model: Option<&dyn Imputer>,
    data: &[TimeSeriesRecord],
    labels: Option<&[bool]>,
    cfg: &LinkConfig,
    workers: Workers,
) -> Result<LinkOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.is_some_and(|l| l.len() != data.len()) {
        return Err(Error::Shape("labels are not aligned with series".into()));
    }
    cfg.aia.validate()?;
    let results = ordered_map(data, workers, |x| -> Result<SeriesLink> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("link/{}", x.id)));
        let (seen, unseen) = place_regions(x.len(), cfg, &mut rng).ok_or_else(|| Error::SkippedSeries {
            series_id: x.id.clone(),
            reason: format!(
                "length {} cannot hold a {}-step mask and a {}-step window {} apart",
                x.len(),
                cfg.u_width,
                cfg.aia.window,
                cfg.aia.stride
            ),
        })?;
        let score = lbrm_score_hiding(target, reference, x, seen, Some(unseen), &cfg.lbrm)?;
        let target_window = attack_window(target, x, unseen, &cfg.aia)?;
        let eval_window = eval_model.map(|m| attack_window(m, x, unseen, &cfg.aia)).transpose()?;
        Ok(SeriesLink {
            score,
            unseen_window: unseen,
            target_window,
            eval_window,
            member: None,
        })
    })?;

    let mut links = Vec::new();
    let mut skipped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut link) => {
                link.member = labels.map(|l| l[i]);
                links.push(link);
            }
            Err(e @ (Error::SkippedSeries { .. } | Error::DegenerateReference { .. })) => {
                warn!("{e}");
                skipped.push(Exclusion {
                    series_id: data[i].id.clone(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }

    let scores: Vec<MembershipScore> = links.iter().map(|l| l.score.clone()).collect();
    let selection = if scores.is_empty() {
        None
    } else {
        Some(select_top_risk(&scores, cfg.q)?)
    };
    let selected: std::collections::HashSet<&str> = selection
        .iter()
        .flat_map(|s| s.selected_ids.iter().map(String::as_str))
        .collect();
    let in_top = |l: &&SeriesLink| selected.contains(l.score.series_id.as_str());

    let aia_all = summarize(links.iter().map(|l| l.target_window.clone()).collect());
    let aia_topq = summarize(links.iter().filter(in_top).map(|l| l.target_window.clone()).collect());
    let (aia_eval_all, aia_eval_topq) = if eval_model.is_some() {
        let all: Vec<WindowResult> = links.iter().filter_map(|l| l.eval_window.clone()).collect();
        let top: Vec<WindowResult> = links.iter().filter(in_top).filter_map(|l| l.eval_window.clone()).collect();
        (Some(summarize(all)), Some(summarize(top)))
    } else {
        (None, None)
    };

    let pairs = |f: fn(&WindowResult) -> Option<f64>| -> Vec<(f64, f64)> {
        links
            .iter()
            .filter_map(|l| f(&l.target_window).map(|m| (l.score.score(), m)))
            .collect()
    };
    let correlation = CorrelationBlock {
        precision: correlate(&pairs(|w| w.precision), cfg.n_permutations, derive_seed(cfg.seed, "perm/precision")),
        recall: correlate(&pairs(|w| w.recall), cfg.n_permutations, derive_seed(cfg.seed, "perm/recall")),
    };

    Ok(LinkOutcome {
        links,
        skipped,
        selection,
        aia_all,
        aia_topq,
        aia_eval_all,
        aia_eval_topq,
        correlation,
    })
}
