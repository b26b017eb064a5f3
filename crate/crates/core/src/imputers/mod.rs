//! The black-box imputer contract and the built-in imputers.
//!
//! An attacker only ever calls [`impute`]: it hands a [`MaskedSeries`] to a
//! model and receives a fully filled series. The built-in models are
//! deterministic desk-scale stand-ins for trained networks:
//!
//! * [`MemorizingImputer`] replays the training series that best matches the
//!   observed context, like a model that has memorized its training set;
//! * [`InterpolatingImputer`] and [`SeasonalMeanImputer`] only use the query
//!   itself, like a model that generalizes without memorizing.
//!
//! [`RemoteImputer`] talks to any server speaking the JSON protocol in
//! [`wire`], and [`serve_imputer`] exposes an in-process model over it.

mod remote;
mod server;
pub mod wire;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{MaskedSeries, TimeSeriesRecord};
use crate::error::{Error, Result};

pub use remote::{RemoteImputer, DEFAULT_TIMEOUT_MS, TIMEOUT_ENV_VAR};
pub use server::{serve_imputer, ImputeServer};

/// A model that fills the masked slots of a series.
pub trait Imputer: Send + Sync {
    /// Short model family name, reported by `/health`.
    fn kind(&self) -> ImputerKind;

    /// Series length the model was built for, if it has one.
    fn series_length(&self) -> Option<usize> {
        None
    }

    /// Returns a sequence of the same length as `masked`. Implementations
    /// are re-entrant; the caller applies the output contract via [`impute`].
    fn impute(&self, masked: &MaskedSeries) -> Result<Vec<f64>>;
}

impl<T: Imputer + ?Sized> Imputer for Arc<T> {
    fn kind(&self) -> ImputerKind {
        (**self).kind()
    }

    fn series_length(&self) -> Option<usize> {
        (**self).series_length()
    }

    fn impute(&self, masked: &MaskedSeries) -> Result<Vec<f64>> {
        (**self).impute(masked)
    }
}

/// Queries `model` and enforces the output contract: same length, finite at
/// every masked slot, and equal to the query wherever it was observed.
pub fn impute(model: &dyn Imputer, masked: &MaskedSeries) -> Result<Vec<f64>> {
    let mut out = model.impute(masked)?;
    if out.len() != masked.len() {
        return Err(Error::ModelOutput(format!(
            "{} imputer returned {} values for a series of length {}",
            model.kind(),
            out.len(),
            masked.len()
        )));
    }
    for (t, (y, obs)) in out.iter_mut().zip(&masked.observed).enumerate() {
        match obs {
            Some(v) => *y = *v,
            None if !y.is_finite() => {
                return Err(Error::ModelOutput(format!(
                    "{} imputer returned a non-finite value at masked t={t}",
                    model.kind()
                )))
            }
            None => {}
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputerKind {
    Memorizing,
    Interpolating,
    SeasonalMean,
    Remote,
}

impl ImputerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ImputerKind::Memorizing => "memorizing",
            ImputerKind::Interpolating => "interpolating",
            ImputerKind::SeasonalMean => "seasonal_mean",
            ImputerKind::Remote => "remote",
        }
    }
}

impl fmt::Display for ImputerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImputerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "memorizing" => Ok(ImputerKind::Memorizing),
            "interpolating" => Ok(ImputerKind::Interpolating),
            "seasonal_mean" => Ok(ImputerKind::SeasonalMean),
            "remote" => Ok(ImputerKind::Remote),
            other => Err(Error::Config(format!("unknown imputer kind {other:?}"))),
        }
    }
}

/// Linear interpolation across every gap; gaps touching an end repeat the
/// nearest observed value, and a series with nothing observed becomes zeros.
pub fn linear_fill(observed: &[Option<f64>]) -> Vec<f64> {
    let n = observed.len();
    let mut out: Vec<f64> = observed.iter().map(|v| v.unwrap_or(0.0)).collect();
    let mut t = 0;
    while t < n {
        if observed[t].is_some() {
            t += 1;
            continue;
        }
        let gap_start = t;
        while t < n && observed[t].is_none() {
            t += 1;
        }
        let left = gap_start.checked_sub(1).map(|l| (l, observed[l].unwrap()));
        let right = (t < n).then(|| (t, observed[t].unwrap()));
        for (k, slot) in out[gap_start..t].iter_mut().enumerate() {
            let pos = gap_start + k;
            *slot = match (left, right) {
                (Some((l, vl)), Some((r, vr))) => {
                    vl + (vr - vl) * (pos - l) as f64 / (r - l) as f64
                }
                (Some((_, v)), None) | (None, Some((_, v))) => v,
                (None, None) => 0.0,
            };
        }
    }
    out
}

/// Fills gaps by straight lines between the surrounding observations.
#[derive(Clone, Copy, Debug, Default)]
pub struct InterpolatingImputer;

impl Imputer for InterpolatingImputer {
    fn kind(&self) -> ImputerKind {
        ImputerKind::Interpolating
    }

    fn impute(&self, masked: &MaskedSeries) -> Result<Vec<f64>> {
        Ok(linear_fill(&masked.observed))
    }
}

/// Fills each masked slot with the mean of the observed slots sharing its
/// phase modulo `period`; phases with no observation fall back to linear
/// interpolation.
#[derive(Clone, Copy, Debug)]
pub struct SeasonalMeanImputer {
    pub period: usize,
}

impl SeasonalMeanImputer {
    /// One day of half-hourly readings.
    pub const DEFAULT_PERIOD: usize = 48;

    pub fn new(period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("seasonal period must be positive".into()));
        }
        Ok(Self { period })
    }
}

impl Default for SeasonalMeanImputer {
    fn default() -> Self {
        Self {
            period: Self::DEFAULT_PERIOD,
        }
    }
}

impl Imputer for SeasonalMeanImputer {
    fn kind(&self) -> ImputerKind {
        ImputerKind::SeasonalMean
    }

    fn impute(&self, masked: &MaskedSeries) -> Result<Vec<f64>> {
        let mut sums = vec![(0.0, 0usize); self.period];
        for (t, v) in masked.observed.iter().enumerate() {
            if let Some(v) = v {
                let s = &mut sums[t % self.period];
                s.0 += v;
                s.1 += 1;
            }
        }
        let fallback = linear_fill(&masked.observed);
        Ok(masked
            .observed
            .iter()
            .enumerate()
            .map(|(t, v)| match (v, sums[t % self.period]) {
                (Some(v), _) => *v,
                (None, (sum, count)) if count > 0 => sum / count as f64,
                (None, _) => fallback[t],
            })
            .collect())
    }
}

/// Best match of a masked query against a training store.
#[derive(Clone, Copy, Debug)]
pub struct StoreMatch<'a> {
    pub record: &'a TimeSeriesRecord,
    /// MAE over the observed slots of the query (0 when nothing is observed).
    pub mae: f64,
}

/// Finds the store record closest to the observed part of `masked` in MAE;
/// ties go to the lexicographically smallest id.
pub fn memorizing_match<'a>(
    store: &'a [TimeSeriesRecord],
    masked: &MaskedSeries,
) -> Result<StoreMatch<'a>> {
    if store.is_empty() {
        return Err(Error::Config("memorizing store is empty".into()));
    }
    let observed: Vec<(usize, f64)> = masked
        .observed
        .iter()
        .enumerate()
        .filter_map(|(t, v)| v.map(|v| (t, v)))
        .collect();
    let mut best: Option<StoreMatch<'a>> = None;
    for record in store {
        if record.len() != masked.len() {
            return Err(Error::Shape(format!(
                "query of length {} against stored series {:?} of length {}",
                masked.len(),
                record.id,
                record.len()
            )));
        }
        let mae = if observed.is_empty() {
            0.0
        } else {
            observed
                .iter()
                .map(|&(t, v)| (record.values[t] - v).abs())
                .sum::<f64>()
                / observed.len() as f64
        };
        let better = match &best {
            None => true,
            Some(b) => mae < b.mae || (mae == b.mae && record.id < b.record.id),
        };
        if better {
            best = Some(StoreMatch { record, mae });
        }
    }
    Ok(best.expect("store is non-empty"))
}

/// Replays the closest training series into the masked slots.
///
/// `strength` blends the replayed values with linear interpolation
/// (1 replays exactly, 0 never memorizes). When `match_tolerance` is set, a
/// query whose best match is further than that in MAE is treated as unseen
/// data and is interpolated instead.
#[derive(Clone, Debug)]
pub struct MemorizingImputer {
    store: Arc<Vec<TimeSeriesRecord>>,
    strength: f64,
    match_tolerance: Option<f64>,
}

impl MemorizingImputer {
    pub fn new(store: Vec<TimeSeriesRecord>) -> Result<Self> {
        if store.is_empty() {
            return Err(Error::Config("memorizing imputer needs a non-empty training store".into()));
        }
        crate::dataset::validate_records(&store)?;
        Ok(Self {
            store: Arc::new(store),
            strength: 1.0,
            match_tolerance: None,
        })
    }

    pub fn with_strength(mut self, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::Config(format!(
                "memorization strength {strength} outside [0, 1]"
            )));
        }
        self.strength = strength;
        Ok(self)
    }

    pub fn with_match_tolerance(mut self, tolerance: Option<f64>) -> Result<Self> {
        if let Some(tol) = tolerance {
            if tol.is_nan() || tol < 0.0 {
                return Err(Error::Config(format!("match tolerance {tol} must be >= 0")));
            }
        }
        self.match_tolerance = tolerance;
        Ok(self)
    }

    pub fn store(&self) -> &[TimeSeriesRecord] {
        &self.store
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn match_tolerance(&self) -> Option<f64> {
        self.match_tolerance
    }
}

impl Imputer for MemorizingImputer {
    fn kind(&self) -> ImputerKind {
        ImputerKind::Memorizing
    }

    fn series_length(&self) -> Option<usize> {
        self.store.first().map(TimeSeriesRecord::len)
    }

    fn impute(&self, masked: &MaskedSeries) -> Result<Vec<f64>> {
        let found = memorizing_match(&self.store, masked)?;
        let mut out = linear_fill(&masked.observed);
        if self.match_tolerance.is_some_and(|tol| found.mae > tol) {
            return Ok(out);
        }
        for m in &masked.masks {
            for t in m.range() {
                let stored = found.record.values[t];
                out[t] = if self.strength == 1.0 {
                    stored
                } else {
                    self.strength * stored + (1.0 - self.strength) * out[t]
                };
            }
        }
        Ok(out)
    }
}

/// A configured model, local or remote.
#[derive(Clone, Debug)]
pub enum ImputerHandle {
    Memorizing(MemorizingImputer),
    Interpolating(InterpolatingImputer),
    SeasonalMean(SeasonalMeanImputer),
    Remote(RemoteImputer),
}

impl ImputerHandle {
    pub fn endpoint(&self) -> Option<&str> {
        match self {
            ImputerHandle::Remote(r) => Some(r.endpoint()),
            _ => None,
        }
    }

    /// A serializable description of the handle, for config echoes.
    pub fn describe(&self) -> serde_json::Value {
        match self {
            ImputerHandle::Memorizing(m) => serde_json::json!({
                "kind": "memorizing",
                "store_size": m.store().len(),
                "strength": m.strength(),
                "match_tolerance": m.match_tolerance(),
            }),
            ImputerHandle::Interpolating(_) => serde_json::json!({"kind": "interpolating"}),
            ImputerHandle::SeasonalMean(s) => {
                serde_json::json!({"kind": "seasonal_mean", "period": s.period})
            }
            ImputerHandle::Remote(r) => serde_json::json!({
                "kind": "remote",
                "endpoint": r.endpoint(),
                "timeout_ms": r.timeout().as_millis() as u64,
            }),
        }
    }
}

impl Imputer for ImputerHandle {
    fn kind(&self) -> ImputerKind {
        match self {
            ImputerHandle::Memorizing(m) => m.kind(),
            ImputerHandle::Interpolating(m) => m.kind(),
            ImputerHandle::SeasonalMean(m) => m.kind(),
            ImputerHandle::Remote(m) => m.kind(),
        }
    }

    fn series_length(&self) -> Option<usize> {
        match self {
            ImputerHandle::Memorizing(m) => m.series_length(),
            ImputerHandle::Interpolating(m) => m.series_length(),
            ImputerHandle::SeasonalMean(m) => m.series_length(),
            ImputerHandle::Remote(m) => m.series_length(),
        }
    }

    fn impute(&self, masked: &MaskedSeries) -> Result<Vec<f64>> {
        match self {
            ImputerHandle::Memorizing(m) => m.impute(masked),
            ImputerHandle::Interpolating(m) => m.impute(masked),
            ImputerHandle::SeasonalMean(m) => m.impute(masked),
            ImputerHandle::Remote(m) => m.impute(masked),
        }
    }
}

impl From<MemorizingImputer> for ImputerHandle {
    fn from(m: MemorizingImputer) -> Self {
        ImputerHandle::Memorizing(m)
    }
}

impl From<InterpolatingImputer> for ImputerHandle {
    fn from(m: InterpolatingImputer) -> Self {
        ImputerHandle::Interpolating(m)
    }
}

impl From<SeasonalMeanImputer> for ImputerHandle {
    fn from(m: SeasonalMeanImputer) -> Self {
        ImputerHandle::SeasonalMean(m)
    }
}

impl From<RemoteImputer> for ImputerHandle {
    fn from(m: RemoteImputer) -> Self {
        ImputerHandle::Remote(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{apply_mask, MaskSpec};
    use proptest::prelude::*;

    fn rec(id: &str, values: &[f64]) -> TimeSeriesRecord {
        TimeSeriesRecord::new(id, values.to_vec())
    }

    fn masked(values: &[Option<f64>], masks: &[MaskSpec]) -> MaskedSeries {
        MaskedSeries::from_parts(values.to_vec(), masks, "q").unwrap()
    }

    #[test]
    fn interpolation_example() {
        let m = masked(&[Some(0.0), None, None, Some(3.0)], &[MaskSpec::new(1, 2)]);
        assert_eq!(InterpolatingImputer.impute(&m).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn interpolation_edges() {
        let m = masked(&[None, None, Some(2.0), None], &[MaskSpec::new(0, 2), MaskSpec::new(3, 1)]);
        assert_eq!(linear_fill(&m.observed), vec![2.0, 2.0, 2.0, 2.0]);
        assert_eq!(linear_fill(&[None, None]), vec![0.0, 0.0]);
    }

    #[test]
    fn seasonal_mean_example() {
        let obs = [Some(5.0), Some(1.0), Some(5.0), Some(1.0), Some(5.0), None];
        let m = masked(&obs, &[MaskSpec::new(5, 1)]);
        let out = SeasonalMeanImputer::new(2).unwrap().impute(&m).unwrap();
        assert_eq!(out[5], 1.0);
        assert!(SeasonalMeanImputer::new(0).is_err());
    }

    #[test]
    fn memorizing_match_examples() {
        let store = vec![rec("b", &[9.0, 9.0, 9.0]), rec("a", &[0.0, 0.0, 0.0])];
        let q = masked(&[Some(8.0), None, Some(8.0)], &[MaskSpec::new(1, 1)]);
        assert_eq!(memorizing_match(&store, &q).unwrap().record.id, "b");

        let member = apply_mask(&store[1], &[MaskSpec::new(0, 2)]).unwrap();
        let m = memorizing_match(&store, &member).unwrap();
        assert_eq!((m.record.id.as_str(), m.mae), ("a", 0.0));

        // equidistant from both stored series
        let tie = masked(&[Some(4.5), None, Some(4.5)], &[MaskSpec::new(1, 1)]);
        assert_eq!(memorizing_match(&store, &tie).unwrap().record.id, "a");
        assert!(memorizing_match(&[], &tie).is_err());
    }

    #[test]
    fn memorizing_replays_members_exactly() {
        let store = vec![rec("a", &[0.3, 1.7, -2.2, 4.1, 0.5]), rec("b", &[1.0; 5])];
        let imp = MemorizingImputer::new(store.clone()).unwrap();
        let q = apply_mask(&store[0], &[MaskSpec::new(1, 3)]).unwrap();
        let out = impute(&imp, &q).unwrap();
        assert_eq!(out, store[0].values);
    }

    #[test]
    fn memorizing_fallback_and_blend() {
        let store = vec![rec("a", &[0.0, 10.0, 0.0])];
        let q = masked(&[Some(5.0), None, Some(5.0)], &[MaskSpec::new(1, 1)]);
        let replay = MemorizingImputer::new(store.clone()).unwrap();
        assert_eq!(replay.impute(&q).unwrap()[1], 10.0);
        let strict = replay.clone().with_match_tolerance(Some(1.0)).unwrap();
        assert_eq!(strict.impute(&q).unwrap()[1], 5.0);
        let half = replay.with_strength(0.5).unwrap();
        assert_eq!(half.impute(&q).unwrap()[1], 7.5);
        assert!(MemorizingImputer::new(vec![]).is_err());
    }

    struct Sloppy;
    impl Imputer for Sloppy {
        fn kind(&self) -> ImputerKind {
            ImputerKind::Remote
        }
        fn impute(&self, masked: &MaskedSeries) -> Result<Vec<f64>> {
            Ok(vec![7.0; masked.len()])
        }
    }

    struct Broken(f64, usize);
    impl Imputer for Broken {
        fn kind(&self) -> ImputerKind {
            ImputerKind::Remote
        }
        fn impute(&self, masked: &MaskedSeries) -> Result<Vec<f64>> {
            Ok(vec![self.0; masked.len() + self.1])
        }
    }

    #[test]
    fn contract_overwrites_observed_and_rejects_bad_output() {
        let q = masked(&[Some(1.0), None, Some(3.0)], &[MaskSpec::new(1, 1)]);
        assert_eq!(impute(&Sloppy, &q).unwrap(), vec![1.0, 7.0, 3.0]);
        assert!(matches!(impute(&Broken(f64::NAN, 0), &q), Err(Error::ModelOutput(_))));
        assert!(matches!(impute(&Broken(0.0, 1), &q), Err(Error::ModelOutput(_))));
    }

    fn arb_masked() -> impl Strategy<Value = (Vec<f64>, Vec<MaskSpec>)> {
        (prop::collection::vec(-100f64..100.0, 4..60), any::<u64>()).prop_map(|(values, bits)| {
            let n = values.len();
            let start = (bits as usize) % n;
            let width = 1 + ((bits >> 20) as usize) % (n - start);
            (values, vec![MaskSpec::new(start, width)])
        })
    }

    proptest! {
        #[test]
        fn builtins_keep_observed_values((values, masks) in arb_masked()) {
            let r = rec("x", &values);
            let q = apply_mask(&r, &masks).unwrap();
            let other = rec("y", &values.iter().map(|v| v * 2.0 + 1.0).collect::<Vec<_>>());
            let models: Vec<Box<dyn Imputer>> = vec![
                Box::new(InterpolatingImputer),
                Box::new(SeasonalMeanImputer::new(3).unwrap()),
                Box::new(MemorizingImputer::new(vec![r.clone(), other]).unwrap()),
            ];
            for m in &models {
                let out = m.impute(&q).unwrap();
                prop_assert_eq!(out.len(), values.len());
                for (t, o) in q.observed.iter().enumerate() {
                    match o {
                        Some(v) => prop_assert_eq!(out[t].to_bits(), v.to_bits()),
                        None => prop_assert!(out[t].is_finite()),
                    }
                }
            }
        }

        #[test]
        fn interpolation_stays_between_endpoints((values, masks) in arb_masked()) {
            let q = apply_mask(&rec("x", &values), &masks).unwrap();
            let out = InterpolatingImputer.impute(&q).unwrap();
            let m = masks[0];
            let ends: Vec<f64> = [m.start.checked_sub(1), Some(m.end()).filter(|&e| e < values.len())]
                .into_iter()
                .flatten()
                .map(|t| values[t])
                .collect();
            if !ends.is_empty() {
                let lo = ends.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = ends.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for t in m.range() {
                    prop_assert!(out[t] >= lo - 1e-12 && out[t] <= hi + 1e-12);
                }
            }
        }
    }
}
