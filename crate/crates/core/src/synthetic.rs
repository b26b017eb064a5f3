//! Seeded bump-series datasets with known membership, for exercising the
//! attacks without trained models.
//!
//! Every series is a positive baseline carrying Gaussian bumps at random
//! positions, scaled by a per-series difficulty factor so that raw losses vary
//! across series independently of membership.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Origin, TimeSeriesRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_series: usize,
    pub n_members: usize,
    pub length: usize,
    /// Bumps are drawn per block of this many steps.
    pub period: usize,
    pub min_bumps: usize,
    pub max_bumps: usize,
    pub amplitude: (f64, f64),
    pub sigma: (f64, f64),
    pub baseline: f64,
    /// Standard deviation of additive white noise before scaling.
    pub noise_sd: f64,
    /// Difficulty factors are `exp(u)` with `u` uniform in `[-s, s]`.
    pub difficulty_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_series: 200,
            n_members: 100,
            length: 480,
            period: 48,
            min_bumps: 1,
            max_bumps: 3,
            amplitude: (1.0, 3.0),
            sigma: (1.0, 4.0),
            baseline: 1.0,
            noise_sd: 0.0,
            difficulty_spread: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_members > self.n_series {
            return Err(Error::Config("more members than series".into()));
        }
        if self.length < 2 || self.period == 0 || self.period > self.length {
            return Err(Error::Config("need 0 < period <= length and length >= 2".into()));
        }
        if self.min_bumps > self.max_bumps {
            return Err(Error::Config("min_bumps exceeds max_bumps".into()));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi;
        if !ordered(self.amplitude) || !ordered(self.sigma) {
            return Err(Error::Config("amplitude and sigma ranges must be positive and ordered".into()));
        }
        if !(self.noise_sd >= 0.0 && self.difficulty_spread >= 0.0) {
            return Err(Error::Config("noise_sd and difficulty_spread must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub centre: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

impl Bump {
    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (-(t - self.centre).powi(2) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub record: TimeSeriesRecord,
    pub member: bool,
    pub difficulty: f64,
    pub bumps: Vec<Bump>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub series: Vec<LabeledSeries>,
}

impl SyntheticDataset {
    pub fn members(&self) -> Vec<TimeSeriesRecord> {
        self.series.iter().filter(|s| s.member).map(|s| s.record.clone()).collect()
    }

    pub fn nonmembers(&self) -> Vec<TimeSeriesRecord> {
        self.series.iter().filter(|s| !s.member).map(|s| s.record.clone()).collect()
    }

    pub fn records(&self) -> Vec<TimeSeriesRecord> {
        self.series.iter().map(|s| s.record.clone()).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.series.iter().map(|s| s.member).collect()
    }
}

/// Draws a dataset; membership is assigned to a random subset of ids so that
/// id order carries no label information.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut is_member: Vec<bool> = (0..cfg.n_series).map(|i| i < cfg.n_members).collect();
    is_member.shuffle(&mut rng);
    let width = cfg.n_series.max(1).to_string().len();

    let series = is_member
        .into_iter()
        .enumerate()
        .map(|(i, member)| {
            let difficulty = if cfg.difficulty_spread > 0.0 {
                rng.random_range(-cfg.difficulty_spread..=cfg.difficulty_spread).exp()
            } else {
                1.0
            };
            let mut bumps = Vec::new();
            for block in (0..cfg.length).step_by(cfg.period) {
                let span = cfg.period.min(cfg.length - block);
                for _ in 0..rng.random_range(cfg.min_bumps..=cfg.max_bumps) {
                    bumps.push(Bump {
                        centre: (block + rng.random_range(0..span)) as f64,
                        sigma: rng.random_range(cfg.sigma.0..=cfg.sigma.1),
                        amplitude: rng.random_range(cfg.amplitude.0..=cfg.amplitude.1),
                    });
                }
            }
            let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");
            let values = (0..cfg.length)
                .map(|t| {
                    let clean = cfg.baseline + bumps.iter().map(|b| b.at(t as f64)).sum::<f64>();
                    let eps = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    difficulty * (clean + eps)
                })
                .collect();
            let mut record = TimeSeriesRecord::new(format!("s{i:0width$}"), values);
            record.origin = if member { Origin::Private } else { Origin::Test };
            LabeledSeries {
                record,
                member,
                difficulty,
                bumps,
            }
        })
        .collect();
    Ok(SyntheticDataset { series })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_labels() {
        let d = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(d.series.len(), 200);
        assert_eq!(d.members().len(), 100);
        assert!(d.series.iter().all(|s| s.record.len() == 480));
        assert!(d.series.iter().all(|s| s.record.values.iter().all(|v| v.is_finite())));
        // labels are not sorted by id
        let labels = d.labels();
        assert!(labels[..100].iter().any(|&m| !m));
    }

    #[test]
    fn seeded() {
        let cfg = SyntheticConfig {
            noise_sd: 0.1,
            difficulty_spread: 1.0,
            ..SyntheticConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SyntheticConfig { seed: 1, ..cfg };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn bumps_per_block_respected() {
        let cfg = SyntheticConfig {
            min_bumps: 2,
            max_bumps: 2,
            ..SyntheticConfig::default()
        };
        let d = generate(&cfg).unwrap();
        assert!(d.series.iter().all(|s| s.bumps.len() == 20));
    }

    #[test]
    fn invalid_configs() {
        let bad = SyntheticConfig {
            n_members: 300,
            ..SyntheticConfig::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SyntheticConfig {
            sigma: (2.0, 1.0),
            ..SyntheticConfig::default()
        };
        assert!(generate(&bad).is_err());
    }
}
