//! Price ingestion, smoothing, windowing, leak-free scaling, splitting and
//! augmentation of sample sets.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Daily closing prices in strictly increasing date order.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    dates: Vec<NaiveDate>,
    values: Vec<f64>,
}

impl PriceSeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(Error::InvalidSeries(format!(
                "{} dates but {} values",
                dates.len(),
                values.len()
            )));
        }
        if dates.is_empty() {
            return Err(Error::EmptySeries);
        }
        for w in dates.windows(2) {
            if w[1] == w[0] {
                return Err(Error::DuplicateTimestamp(w[0].to_string()));
            }
            if w[1] < w[0] {
                return Err(Error::InvalidSeries(format!("dates not increasing at {}", w[1])));
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::InvalidSeries(format!("price {v} is not a positive finite number")));
        }
        Ok(PriceSeries { dates, values })
    }

    /// Builds a series on consecutive days starting at `start`.
    pub fn from_values(start: NaiveDate, values: Vec<f64>) -> Result<Self> {
        let dates = start.iter_days().take(values.len()).collect();
        Self::new(dates, values)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Points with index in `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidSeries(format!(
                "range {start}..{end} outside series of length {}",
                self.len()
            )));
        }
        Ok(PriceSeries {
            dates: self.dates[start..end].to_vec(),
            values: self.values[start..end].to_vec(),
        })
    }

    /// Writes the two-column `date,close` form read by [`load_price_csv`].
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "close"])?;
        for (d, v) in self.dates.iter().zip(&self.values) {
            w.write_record([d.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a `date,close` CSV. Rows may come in any order; the result is sorted.
pub fn load_price_csv(path: impl AsRef<Path>) -> Result<PriceSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_price_csv(&text)
}

pub fn parse_price_csv(text: &str) -> Result<PriceSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.len() != 2 || &header[0] != "date" || &header[1] != "close" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `date,close`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut rows: Vec<(NaiveDate, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Parse { line, message };
        if record.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", record.len())));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| bad(format!("bad date `{}`: {e}", &record[0])))?;
        let close: f64 = record[1]
            .parse()
            .map_err(|_| bad(format!("non-numeric price `{}`", &record[1])))?;
        if !close.is_finite() || close <= 0.0 {
            return Err(bad(format!("price must be positive and finite, got {close}")));
        }
        rows.push((date, close));
    }
    if rows.is_empty() {
        return Err(Error::EmptySeries);
    }
    rows.sort_by_key(|r| r.0);
    let (dates, values) = rows.into_iter().unzip();
    PriceSeries::new(dates, values)
}

/// Backward-looking exponential moving average with `alpha = 2 / (span + 1)`.
pub fn ema(values: &[f64], span: usize) -> Result<Vec<f64>> {
    if span < 1 {
        return Err(Error::InvalidSpan(span));
    }
    let alpha = 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut prev = None;
    for &x in values {
        let y = match prev {
            None => x,
            Some(p) => alpha * x + (1.0 - alpha) * p,
        };
        out.push(y);
        prev = Some(y);
    }
    Ok(out)
}

pub fn ema_smooth(series: &PriceSeries, span: usize) -> Result<PriceSeries> {
    Ok(PriceSeries {
        dates: series.dates.clone(),
        values: ema(&series.values, span)?,
    })
}

/// Sample geometry: `k = t + s` points, `t` observed and `s` forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WindowSpecRepr")]
pub struct WindowSpec {
    pub k: usize,
    pub t: usize,
    pub s: usize,
    pub stride: usize,
}

#[derive(Deserialize)]
struct WindowSpecRepr {
    k: Option<usize>,
    t: usize,
    s: usize,
    #[serde(default = "one")]
    stride: usize,
}

fn one() -> usize {
    1
}

impl TryFrom<WindowSpecRepr> for WindowSpec {
    type Error = Error;

    fn try_from(r: WindowSpecRepr) -> Result<Self> {
        let spec = WindowSpec::new(r.t, r.s, r.stride)?;
        match r.k {
            Some(k) if k != spec.k => Err(Error::InvalidWindow(format!(
                "k = {k} but t + s = {}",
                spec.k
            ))),
            _ => Ok(spec),
        }
    }
}

impl WindowSpec {
    pub fn new(t: usize, s: usize, stride: usize) -> Result<Self> {
        if t == 0 || s == 0 || stride == 0 {
            return Err(Error::InvalidWindow(format!(
                "t, s and stride must be positive (t={t}, s={s}, stride={stride})"
            )));
        }
        Ok(WindowSpec { k: t + s, t, s, stride })
    }

    pub fn validate(&self) -> Result<()> {
        let again = WindowSpec::new(self.t, self.s, self.stride)?;
        if again.k != self.k {
            return Err(Error::InvalidWindow(format!("k = {} but t + s = {}", self.k, again.k)));
        }
        Ok(())
    }

    /// Number of windows a series of `n` points yields.
    pub fn count(&self, n: usize) -> usize {
        if n < self.k {
            0
        } else {
            (n - self.k) / self.stride + 1
        }
    }
}

/// Min and max of a sample's observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: f64,
    pub max: f64,
}

impl ScalerParams {
    pub const IDENTITY: ScalerParams = ScalerParams { min: 0.0, max: 1.0 };

    /// Fits on `observation`. Fails when the window is constant.
    pub fn fit(observation: &[f64]) -> Result<Self> {
        let min = observation.iter().copied().fold(f64::INFINITY, f64::min);
        let max = observation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if observation.is_empty() || !(max > min) {
            return Err(Error::DegenerateSample { value: min });
        }
        Ok(ScalerParams { min, max })
    }

    pub fn transform(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn inverse(&self, x: f64) -> f64 {
        x * (self.max - self.min) + self.min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

/// One window of `k` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub values: Vec<f64>,
    pub origin: Origin,
    pub scaler: ScalerParams,
}

impl SequenceSample {
    pub fn real(values: Vec<f64>) -> Self {
        SequenceSample {
            values,
            origin: Origin::Real,
            scaler: ScalerParams::IDENTITY,
        }
    }

    pub fn synthetic(values: Vec<f64>) -> Self {
        SequenceSample {
            values,
            origin: Origin::Synthetic,
            scaler: ScalerParams::IDENTITY,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observation(&self, window: &WindowSpec) -> &[f64] {
        &self.values[..window.t]
    }

    pub fn target(&self, window: &WindowSpec) -> &[f64] {
        &self.values[window.t..window.k]
    }

    /// Maps values back to price space with the stored scaler.
    pub fn denormalize(&self) -> Vec<f64> {
        self.values.iter().map(|&v| self.scaler.inverse(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    #[default]
    Unsplit,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
            SplitTag::Unsplit => "unsplit",
        }
    }
}

/// Ordered samples sharing one window geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    pub samples: Vec<SequenceSample>,
    pub window: WindowSpec,
    pub split: SplitTag,
}

#[derive(Serialize, Deserialize)]
struct SequenceSetFile {
    k: usize,
    t: usize,
    s: usize,
    samples: Vec<SequenceSample>,
    #[serde(default, skip_serializing_if = "is_unsplit")]
    split: SplitTag,
}

fn is_unsplit(tag: &SplitTag) -> bool {
    *tag == SplitTag::Unsplit
}

impl SequenceSet {
    pub fn new(samples: Vec<SequenceSample>, window: WindowSpec, split: SplitTag) -> Result<Self> {
        let set = SequenceSet { samples, window, split };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if let Some(s) = self.samples.iter().find(|s| s.len() != self.window.k) {
            return Err(Error::WindowMismatch {
                expected: self.window.k,
                got: s.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count_origin(&self, origin: Origin) -> usize {
        self.samples.iter().filter(|s| s.origin == origin).count()
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Union of two sets in order; the result carries `split`.
    pub fn concat(&self, other: &SequenceSet, split: SplitTag) -> Result<SequenceSet> {
        if other.window.k != self.window.k {
            return Err(Error::WindowMismatch {
                expected: self.window.k,
                got: other.window.k,
            });
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Ok(SequenceSet {
            samples,
            window: self.window,
            split,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SequenceSetFile {
            k: self.window.k,
            t: self.window.t,
            s: self.window.s,
            samples: self.samples.clone(),
            split: self.split,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SequenceSetFile = serde_json::from_str(text)?;
        let window = WindowSpec::new(file.t, file.s, 1)?;
        if window.k != file.k {
            return Err(Error::InvalidWindow(format!("k = {} but t + s = {}", file.k, window.k)));
        }
        SequenceSet::new(file.samples, window, file.split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Cuts overlapping raw windows; window `i` covers `i*stride .. i*stride + k`.
pub fn make_windows(series: &PriceSeries, spec: &WindowSpec) -> Result<SequenceSet> {
    spec.validate()?;
    let n = series.len();
    if n < spec.k {
        return Err(Error::SeriesTooShort { len: n, needed: spec.k });
    }
    let samples = (0..spec.count(n))
        .map(|i| {
            let start = i * spec.stride;
            SequenceSample::real(series.values()[start..start + spec.k].to_vec())
        })
        .collect();
    Ok(SequenceSet {
        samples,
        window: *spec,
        split: SplitTag::Unsplit,
    })
}

/// Min-max scales a raw sample with parameters fit on its first `t` points only.
///
/// Forecast values are not clamped and may fall outside `[0, 1]`.
pub fn normalize_sample(sample: &SequenceSample, spec: &WindowSpec) -> Result<SequenceSample> {
    if sample.len() != spec.k {
        return Err(Error::WindowMismatch {
            expected: spec.k,
            got: sample.len(),
        });
    }
    let scaler = ScalerParams::fit(&sample.values[..spec.t])?;
    Ok(SequenceSample {
        values: sample.values.iter().map(|&v| scaler.transform(v)).collect(),
        origin: sample.origin,
        scaler,
    })
}

/// Normalizes every sample, dropping degenerate ones. Returns the set and the
/// number dropped.
pub fn normalize_set(set: &SequenceSet) -> Result<(SequenceSet, usize)> {
    let mut samples = Vec::with_capacity(set.len());
    let mut dropped = 0;
    for (i, s) in set.samples.iter().enumerate() {
        match normalize_sample(s, &set.window) {
            Ok(n) => samples.push(n),
            Err(Error::DegenerateSample { value }) => {
                log::warn!("dropping sample {i}: constant observation window at {value}");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((
        SequenceSet {
            samples,
            window: set.window,
            split: set.split,
        },
        dropped,
    ))
}

/// Train / validation / test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.validation, self.test];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::InvalidSplit(format!("fractions must lie in (0, 1): {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("fractions must sum to 1: {fr:?}")));
        }
        Ok(())
    }

    /// Split sizes for `n` samples: floors of each share, remainder handed
    /// out to train, then validation, then test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let fr = [self.train, self.validation, self.test];
        let mut sizes = fr.map(|f| (f * n as f64 + 1e-9).floor() as usize);
        let mut rem = n - sizes.iter().sum::<usize>();
        let mut i = 0;
        while rem > 0 {
            sizes[i % 3] += 1;
            rem -= 1;
            i += 1;
        }
        (sizes[0], sizes[1], sizes[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMethod {
    /// Contiguous blocks in time order: train earliest, test latest.
    #[default]
    Chronological,
    /// Seeded shuffle before cutting.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: SequenceSet,
    pub validation: SequenceSet,
    pub test: SequenceSet,
}

/// Sample indices assigned to each split.
pub fn split_indices(n: usize, spec: &SplitSpec, method: SplitMethod, seed: u64) -> [Vec<usize>; 3] {
    let (a, b, _) = spec.sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    if method == SplitMethod::Random {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut parts = [
        order[..a].to_vec(),
        order[a..a + b].to_vec(),
        order[a + b..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

pub fn split_dataset(set: &SequenceSet, spec: &SplitSpec, method: SplitMethod, seed: u64) -> Result<Splits> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    spec.validate()?;
    let [tr, va, te] = split_indices(set.len(), spec, method, seed);
    let take = |idx: &[usize], tag| SequenceSet {
        samples: idx.iter().map(|&i| set.samples[i].clone()).collect(),
        window: set.window,
        split: tag,
    };
    Ok(Splits {
        train: take(&tr, SplitTag::Train),
        validation: take(&va, SplitTag::Validation),
        test: take(&te, SplitTag::Test),
    })
}

/// Number of synthetic samples `ratio` asks for on a training set of `n`.
pub fn synthetic_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Appends `round(ratio * |train|)` synthetic samples, taken in generation order.
pub fn augment(train: &SequenceSet, synthetic: &SequenceSet, ratio: f64) -> Result<SequenceSet> {
    if !(ratio >= 0.0) || !ratio.is_finite() {
        return Err(Error::InvalidConfig(format!("augmentation ratio must be >= 0, got {ratio}")));
    }
    let needed = synthetic_count(train.len(), ratio);
    if needed == 0 {
        return Ok(train.clone());
    }
    if synthetic.window.k != train.window.k {
        return Err(Error::WindowMismatch {
            expected: train.window.k,
            got: synthetic.window.k,
        });
    }
    if synthetic.len() < needed {
        return Err(Error::InsufficientSynthetic {
            needed,
            available: synthetic.len(),
        });
    }
    let mut samples = train.samples.clone();
    samples.extend(synthetic.samples[..needed].iter().cloned().map(|mut s| {
        s.origin = Origin::Synthetic;
        s
    }));
    Ok(SequenceSet {
        samples,
        window: train.window,
        split: train.split,
    })
}
