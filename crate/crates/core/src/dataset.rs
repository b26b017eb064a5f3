//! Time-series records, dataset splits, and masking.
//!
//! Every record is a fully observed univariate series. Missing values only
//! appear in a [`MaskedSeries`], where they are explicit `None` slots.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which partition a record was assigned to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Public,
    Private,
    Test,
    #[default]
    Unknown,
}

/// One univariate series, the unit an attacker asks membership questions about.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesRecord {
    pub id: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub origin: Origin,
}

impl TimeSeriesRecord {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            values,
            origin: Origin::Unknown,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Checks the dataset-level invariants: at least one record, every value
/// finite, and all series sharing one length of at least 2.
pub fn validate_records(records: &[TimeSeriesRecord]) -> Result<usize> {
    let first = records.first().ok_or(Error::EmptyDataset)?;
    let len = first.len();
    if len < 2 {
        return Err(Error::Schema(format!(
            "series {:?} has length {len}, need at least 2",
            first.id
        )));
    }
    for r in records {
        if r.len() != len {
            return Err(Error::Schema(format!(
                "ragged series: {:?} has length {}, expected {len}",
                r.id,
                r.len()
            )));
        }
        if let Some(t) = r.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "series {:?} has a non-finite value at t={t}",
                r.id
            )));
        }
    }
    Ok(len)
}

/// On-disk layout of a dataset CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvSchema {
    /// `id,t,value`, one row per observation.
    Long,
    /// `id,v0,...,v{T-1}`, one row per series.
    Wide,
}

impl std::str::FromStr for CsvSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(CsvSchema::Long),
            "wide" => Ok(CsvSchema::Wide),
            other => Err(Error::Config(format!("unknown CSV schema {other:?}"))),
        }
    }
}

fn parse_value(field: &str, line: u64) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("non-numeric value {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("non-finite value {field:?}"),
        });
    }
    Ok(v)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

/// Loads a dataset. Records keep the order in which their ids first appear.
pub fn load_csv(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Vec<TimeSeriesRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Same as [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, schema: CsvSchema) -> Result<Vec<TimeSeriesRecord>> {
    // flexible so ragged wide rows surface as SchemaError rather than a csv error
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let records = match schema {
        CsvSchema::Long => read_long(&mut rdr)?,
        CsvSchema::Wide => read_wide(&mut rdr)?,
    };
    validate_records(&records)?;
    Ok(records)
}

fn read_long<R: std::io::Read>(rdr: &mut csv::Reader<R>) -> Result<Vec<TimeSeriesRecord>> {
    let headers = rdr.headers()?.clone();
    let expected = ["id", "t", "value"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(Error::Schema(format!(
            "long CSV header must be id,t,value, got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, BTreeMap<usize, f64>> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        if row.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, got {}", row.len()),
            });
        }
        let id = row[0].trim().to_string();
        let t: usize = row[1].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid time index {:?}", &row[1]),
        })?;
        let value = parse_value(&row[2], line)?;
        let slots = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            BTreeMap::new()
        });
        if slots.insert(t, value).is_some() {
            return Err(Error::Duplicate { id, t });
        }
    }

    order
        .into_iter()
        .map(|id| {
            let slots = by_id.remove(&id).unwrap_or_default();
            // t must cover 0..len without gaps
            if let Some((&last, _)) = slots.iter().next_back() {
                if last + 1 != slots.len() {
                    return Err(Error::Schema(format!(
                        "series {id:?} has gaps in its time index (max t={last}, {} points)",
                        slots.len()
                    )));
                }
            }
            Ok(TimeSeriesRecord::new(id, slots.into_values().collect()))
        })
        .collect()
}

fn read_wide<R: std::io::Read>(rdr: &mut csv::Reader<R>) -> Result<Vec<TimeSeriesRecord>> {
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers[0].trim() != "id" {
        return Err(Error::Schema("wide CSV header must start with id".into()));
    }
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        let id = row[0].trim().to_string();
        let values = row
            .iter()
            .skip(1)
            .map(|f| parse_value(f, line))
            .collect::<Result<Vec<_>>>()?;
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::Duplicate { id, t: 0 });
        }
        out.push(TimeSeriesRecord::new(id, values));
    }
    Ok(out)
}

/// Writes records in the given layout. Values use the shortest decimal form
/// that parses back to the identical `f64`.
pub fn write_csv(
    path: impl AsRef<Path>,
    records: &[TimeSeriesRecord],
    schema: CsvSchema,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(file, records, schema)
}

pub fn write_csv_to<W: std::io::Write>(
    writer: W,
    records: &[TimeSeriesRecord],
    schema: CsvSchema,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    match schema {
        CsvSchema::Long => {
            w.write_record(["id", "t", "value"])?;
            for r in records {
                for (t, v) in r.values.iter().enumerate() {
                    w.write_record([r.id.as_str(), &t.to_string(), &v.to_string()])?;
                }
            }
        }
        CsvSchema::Wide => {
            let len = records.first().map_or(0, |r| r.len());
            let mut header = vec!["id".to_string()];
            header.extend((0..len).map(|t| format!("v{t}")));
            w.write_record(&header)?;
            for r in records {
                let mut row = vec![r.id.clone()];
                row.extend(r.values.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// An exact non-negative fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub const fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    /// `floor(n * self)`.
    pub fn floor_of(self, n: usize) -> usize {
        ((n as u128 * self.num as u128) / self.den as u128) as usize
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Fractions of series assigned to the public, private and test partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub public_fraction: Fraction,
    pub private_fraction: Fraction,
    pub test_fraction: Fraction,
    pub seed: u64,
}

impl SplitSpec {
    /// Training from scratch: 2/5 public, 2/5 private, 1/5 test.
    pub fn scratch(seed: u64) -> Self {
        Self {
            public_fraction: Fraction::new(2, 5),
            private_fraction: Fraction::new(2, 5),
            test_fraction: Fraction::new(1, 5),
            seed,
        }
    }

    /// Fine-tuning: 3/5 public, 1/5 private, 1/5 test.
    pub fn finetune(seed: u64) -> Self {
        Self {
            public_fraction: Fraction::new(3, 5),
            private_fraction: Fraction::new(1, 5),
            test_fraction: Fraction::new(1, 5),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.public_fraction, self.private_fraction, self.test_fraction];
        if fr.iter().any(|f| f.num == 0 || f.den == 0) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        // a/b + c/d + e/f == 1, compared exactly over the common denominator
        let den: u128 = fr.iter().map(|f| f.den as u128).product();
        let num: u128 = fr
            .iter()
            .map(|f| f.num as u128 * (den / f.den as u128))
            .sum();
        if num != den {
            return Err(Error::Config(format!(
                "split fractions {}, {}, {} do not sum to 1",
                fr[0], fr[1], fr[2]
            )));
        }
        Ok(())
    }

    /// Partition sizes for `n` series: floor for public and private, the
    /// remainder to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let public = self.public_fraction.floor_of(n);
        let private = self.private_fraction.floor_of(n);
        (public, private, n - public - private)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Partitions {
    pub public: Vec<TimeSeriesRecord>,
    pub private: Vec<TimeSeriesRecord>,
    pub test: Vec<TimeSeriesRecord>,
}

/// Splits whole series into public, private and test partitions.
pub fn split_dataset(records: &[TimeSeriesRecord], spec: &SplitSpec) -> Result<Partitions> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    spec.validate()?;
    let n = records.len();
    if n < 5 {
        return Err(Error::Config(format!(
            "need at least 5 series to split, got {n}"
        )));
    }
    let (n_public, n_private, _) = spec.sizes(n);
    if n_public == 0 || n_private == 0 || n_public + n_private >= n {
        return Err(Error::Config(format!(
            "fractions not representable on {n} series"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let take = |idx: &[usize], origin: Origin| -> Vec<TimeSeriesRecord> {
        idx.iter()
            .map(|&i| TimeSeriesRecord {
                origin,
                ..records[i].clone()
            })
            .collect()
    };
    Ok(Partitions {
        public: take(&order[..n_public], Origin::Public),
        private: take(&order[n_public..n_public + n_private], Origin::Private),
        test: take(&order[n_public + n_private..], Origin::Test),
    })
}

/// A contiguous run of masked time steps, `[start, start + width)`.
///
/// Also used for attack windows, which are intervals of the same shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MaskSpec {
    pub start: usize,
    pub width: usize,
}

impl MaskSpec {
    pub const fn new(start: usize, width: usize) -> Self {
        Self { start, width }
    }

    pub fn end(&self) -> usize {
        self.start + self.width
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t < self.end()
    }

    pub fn overlaps(&self, other: &MaskSpec) -> bool {
        self.start < other.end() && other.start < self.end()
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Mask(format!("mask at {} has zero width", self.start)));
        }
        if self.end() > len {
            return Err(Error::Mask(format!(
                "mask [{}, {}) exceeds series length {len}",
                self.start,
                self.end()
            )));
        }
        Ok(())
    }
}

/// Sorts masks and checks they are in range and pairwise disjoint.
pub fn normalize_masks(masks: &[MaskSpec], len: usize) -> Result<Vec<MaskSpec>> {
    let mut sorted = masks.to_vec();
    sorted.sort();
    for m in &sorted {
        m.validate(len)?;
    }
    for pair in sorted.windows(2) {
        if pair[0].overlaps(&pair[1]) {
            return Err(Error::Mask(format!(
                "masks [{}, {}) and [{}, {}) overlap",
                pair[0].start,
                pair[0].end(),
                pair[1].start,
                pair[1].end()
            )));
        }
    }
    Ok(sorted)
}

/// The view of a series sent to an imputer: `None` exactly inside the masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSeries {
    pub observed: Vec<Option<f64>>,
    pub masks: Vec<MaskSpec>,
    pub source_id: String,
}

impl MaskedSeries {
    /// Builds a masked series from wire-level parts, checking that the absent
    /// slots line up exactly with the masks.
    pub fn from_parts(
        observed: Vec<Option<f64>>,
        masks: &[MaskSpec],
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let masks = normalize_masks(masks, observed.len())?;
        let mut inside = vec![false; observed.len()];
        for m in &masks {
            inside[m.range()].iter_mut().for_each(|b| *b = true);
        }
        for (t, (v, &masked)) in observed.iter().zip(&inside).enumerate() {
            match (v, masked) {
                (None, false) => {
                    return Err(Error::Mask(format!(
                        "value missing at t={t} outside every mask"
                    )))
                }
                (Some(_), true) => {
                    return Err(Error::Mask(format!("value present at masked t={t}")))
                }
                (Some(x), false) if !x.is_finite() => {
                    return Err(Error::Mask(format!("non-finite observed value at t={t}")))
                }
                _ => {}
            }
        }
        Ok(Self {
            observed,
            masks,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.observed[t].is_none()
    }

    pub fn masked_count(&self) -> usize {
        self.masks.iter().map(|m| m.width).sum()
    }

    /// Fills the masked slots from `truth`.
    pub fn unmask(&self, truth: &[f64]) -> Result<Vec<f64>> {
        if truth.len() != self.len() {
            return Err(Error::Shape(format!(
                "truth has length {}, masked series {}",
                truth.len(),
                self.len()
            )));
        }
        Ok(self
            .observed
            .iter()
            .zip(truth)
            .map(|(o, &t)| o.unwrap_or(t))
            .collect())
    }
}

/// Hides the values of `record` under `masks`.
pub fn apply_mask(record: &TimeSeriesRecord, masks: &[MaskSpec]) -> Result<MaskedSeries> {
    let masks = normalize_masks(masks, record.len())?;
    let mut observed: Vec<Option<f64>> = record.values.iter().copied().map(Some).collect();
    for m in &masks {
        observed[m.range()].iter_mut().for_each(|v| *v = None);
    }
    Ok(MaskedSeries {
        observed,
        masks,
        source_id: record.id.clone(),
    })
}

/// Draws a mask start uniformly from `[0, len - width]`.
pub fn random_mask_for_len<R: Rng + ?Sized>(len: usize, width: usize, rng: &mut R) -> Result<MaskSpec> {
    if width == 0 {
        return Err(Error::Mask("mask width must be at least 1".into()));
    }
    if width > len {
        return Err(Error::Mask(format!(
            "mask width {width} exceeds series length {len}"
        )));
    }
    Ok(MaskSpec::new(rng.random_range(0..=len - width), width))
}

/// A seeded uniformly placed mask of the given width.
pub fn random_mask(record: &TimeSeriesRecord, width: usize, seed: u64) -> Result<MaskSpec> {
    random_mask_for_len(record.len(), width, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mixes a run seed with a string key into a per-item seed.
///
/// Per-series randomness is keyed by series id rather than position, so that
/// results do not depend on input order or on how work is scheduled.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a over the key, then a splitmix64 finalizer over the combination
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
