use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cost of matching one point of each sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointwiseDistance {
    #[default]
    Absolute,
    Squared,
}

impl PointwiseDistance {
    #[inline]
    fn cost(self, a: f64, b: f64) -> f64 {
        match self {
            PointwiseDistance::Absolute => (a - b).abs(),
            PointwiseDistance::Squared => (a - b) * (a - b),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtwConfig {
    pub pointwise_distance: PointwiseDistance,
    /// Sakoe-Chiba radius: cells with `|i - j| > radius` are not reachable.
    pub band_radius: Option<usize>,
}

/// Dynamic time warping distance: the minimum, over monotone alignments
/// anchored at both ends with unit steps, of the summed pointwise costs.
///
/// The sum is not normalized by path length.
pub fn dtw_distance(a: &[f64], b: &[f64], cfg: &DtwConfig) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (n, m) = (a.len(), b.len());
    let radius = match cfg.band_radius {
        Some(r) => {
            if n.abs_diff(m) > r {
                return Err(Error::Config(format!(
                    "band radius {r} cannot align lengths {n} and {m}"
                )));
            }
            r
        }
        None => n.max(m),
    };

    let dist = cfg.pointwise_distance;
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr.fill(f64::INFINITY);
        let lo = i.saturating_sub(radius).max(1);
        let hi = (i + radius).min(m);
        let ai = a[i - 1];
        for j in lo..=hi {
            let best = prev[j - 1].min(prev[j]).min(curr[j - 1]);
            curr[j] = dist.cost(ai, b[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}
