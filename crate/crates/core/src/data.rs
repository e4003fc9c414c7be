//! Dataset ingestion, scaling, splitting, mini-batch construction, and
//! synthetic series with autocorrelated noise.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Months, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::StepInput;

/// Sampling frequency of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "hourly")]
    Hourly,
    #[serde(rename = "daily")]
    Daily,
    #[serde(rename = "5min")]
    FiveMin,
    #[serde(rename = "quarterly")]
    Quarterly,
    #[serde(rename = "workday")]
    Workday,
}

impl Granularity {
    pub fn has_hour(self) -> bool {
        matches!(self, Granularity::Hourly | Granularity::FiveMin)
    }

    pub fn has_dow(self) -> bool {
        !matches!(self, Granularity::Quarterly)
    }

    /// Length of the dominant seasonal cycle in steps.
    pub fn season(self) -> usize {
        match self {
            Granularity::Hourly => 24,
            Granularity::Daily => 7,
            Granularity::FiveMin => 288,
            Granularity::Quarterly => 4,
            Granularity::Workday => 5,
        }
    }

    /// The timestamp `n` steps after (or before, when negative) `t`.
    ///
    /// Workday arithmetic assumes `t` falls on a weekday.
    pub fn advance(self, t: NaiveDateTime, n: i64) -> Option<NaiveDateTime> {
        match self {
            Granularity::Hourly => t.checked_add_signed(chrono::Duration::try_hours(n)?),
            Granularity::FiveMin => t.checked_add_signed(chrono::Duration::try_minutes(n.checked_mul(5)?)?),
            Granularity::Daily => t.checked_add_signed(chrono::Duration::try_days(n)?),
            Granularity::Quarterly => {
                let months = u32::try_from(n.unsigned_abs().checked_mul(3)?).ok()?;
                if n >= 0 {
                    t.checked_add_months(Months::new(months))
                } else {
                    t.checked_sub_months(Months::new(months))
                }
            }
            Granularity::Workday => {
                let w = i64::from(t.weekday().num_days_from_monday());
                if w > 4 {
                    return None;
                }
                let total = w + n;
                let days = total.div_euclid(5) * 7 + total.rem_euclid(5) - w;
                t.checked_add_signed(chrono::Duration::try_days(days)?)
            }
        }
    }

    fn infer(a: NaiveDateTime, b: NaiveDateTime) -> Result<Self> {
        let secs = (b - a).num_seconds();
        let g = match secs {
            300 => Granularity::FiveMin,
            3_600 => Granularity::Hourly,
            86_400 => Granularity::Daily,
            259_200 if a.weekday() == chrono::Weekday::Fri => Granularity::Workday,
            _ if Granularity::Quarterly.advance(a, 1) == Some(b) => Granularity::Quarterly,
            _ => return Err(Error::UnsupportedGranularity(format!("spacing of {secs} seconds between {a} and {b}"))),
        };
        Ok(g)
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Hourly => "hourly",
            Granularity::Daily => "daily",
            Granularity::FiveMin => "5min",
            Granularity::Quarterly => "quarterly",
            Granularity::Workday => "workday",
        })
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hourly" => Ok(Granularity::Hourly),
            "daily" => Ok(Granularity::Daily),
            "5min" => Ok(Granularity::FiveMin),
            "quarterly" => Ok(Granularity::Quarterly),
            "workday" => Ok(Granularity::Workday),
            other => Err(Error::UnsupportedGranularity(other.to_string())),
        }
    }
}

/// On-disk layout of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataFormat {
    #[serde(rename = "long-csv")]
    LongCsv,
    #[serde(rename = "wide-csv")]
    WideCsv,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long-csv" => Ok(DataFormat::LongCsv),
            "wide-csv" => Ok(DataFormat::WideCsv),
            other => Err(Error::Config(format!("unknown data format `{other}` (expected long-csv or wide-csv)"))),
        }
    }
}

/// Integer time steps are anchored at a Monday midnight so that calendar
/// covariates are defined for them too.
pub fn step_origin() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1).and_then(|d| d.and_hms_opt(0, 0, 0)).expect("valid origin date")
}

/// Chronological split boundaries: train `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMarks {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub id: String,
    pub start: NaiveDateTime,
    /// Set when the source file used integer steps instead of calendar time.
    pub start_step: Option<i64>,
    pub values: Vec<f64>,
    pub split: Option<SplitMarks>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index range covered by a split.
    pub fn span(&self, split: Split) -> Option<Range<usize>> {
        let m = self.split?;
        Some(match split {
            Split::Train => 0..m.train_end,
            Split::Validation => m.train_end..m.val_end,
            Split::Test => m.val_end..self.len(),
        })
    }
}

/// Hour-of-day and day-of-week codes (Monday = 0) for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CovariateCodes {
    pub hour: Option<u8>,
    pub dow: Option<u8>,
}

pub fn encode_covariates(t: NaiveDateTime, granularity: Granularity, series_id: usize) -> StepInput {
    let hour = granularity.has_hour().then(|| t.hour() as u8);
    let dow = granularity.has_dow().then(|| t.weekday().num_days_from_monday() as u8);
    StepInput { lag_value: 0.0, hour, dow, series_id }
}

/// A collection of regularly sampled univariate series, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    granularity: Granularity,
    series: Vec<Series>,
    codes: Vec<Vec<CovariateCodes>>,
}

impl TimeSeriesDataset {
    pub fn new(granularity: Granularity, mut series: Vec<Series>) -> Result<Self> {
        series.sort_by(|a, b| a.id.cmp(&b.id));
        for w in series.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Config(format!("duplicate series id `{}`", w[0].id)));
            }
        }
        for s in &series {
            if s.values.is_empty() {
                return Err(Error::SeriesTooShort { series: s.id.clone(), have: 0, need: 1 });
            }
            if let Some(i) = s.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Parse { line: 0, message: format!("series `{}` has a non-finite value at step {i}", s.id) });
            }
        }
        let codes = series
            .iter()
            .enumerate()
            .map(|(k, s)| {
                (0..s.len())
                    .map(|i| {
                        let t = granularity.advance(s.start, i as i64).ok_or_else(|| timestamp_overflow(&s.id))?;
                        let e = encode_covariates(t, granularity, k);
                        Ok(CovariateCodes { hour: e.hour, dow: e.dow })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { granularity, series, codes })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn series(&self) -> &[Series] {
        &self.series
    }

    pub fn n_series(&self) -> usize {
        self.series.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.series.binary_search_by(|s| s.id.as_str().cmp(id)).ok()
    }

    pub fn timestamp(&self, series: usize, idx: i64) -> Option<NaiveDateTime> {
        self.granularity.advance(self.series[series].start, idx)
    }

    /// Timestamp rendered in the source file's convention.
    pub fn label(&self, series: usize, idx: usize) -> String {
        let s = &self.series[series];
        match s.start_step {
            Some(step) => (step + idx as i64).to_string(),
            None => match self.timestamp(series, idx as i64) {
                Some(t) => format_rfc3339(t),
                None => format!("+{idx}"),
            },
        }
    }

    /// Covariate codes of step `idx`, which may lie past the end of the series.
    pub fn codes(&self, series: usize, idx: usize) -> CovariateCodes {
        if let Some(c) = self.codes[series].get(idx) {
            return *c;
        }
        let t = self.timestamp(series, idx as i64).unwrap_or_else(step_origin);
        let e = encode_covariates(t, self.granularity, series);
        CovariateCodes { hour: e.hour, dow: e.dow }
    }

    pub fn step_input(&self, series: usize, idx: usize, lag_value: f64) -> StepInput {
        let c = self.codes(series, idx);
        StepInput { lag_value, hour: c.hour, dow: c.dow, series_id: series }
    }

    /// Marks the last `eval_span` steps of each series as test and the
    /// `eval_span` steps before them as validation.
    pub fn with_splits(mut self, eval_span: usize) -> Result<Self> {
        for s in &mut self.series {
            if s.len() < 2 * eval_span {
                return Err(Error::SeriesTooShort { series: s.id.clone(), have: s.len(), need: 2 * eval_span + 1 });
            }
            let val_end = s.len() - eval_span;
            let train_end = val_end - eval_span;
            if train_end == 0 {
                return Err(Error::EmptyTrainSplit(s.id.clone()));
            }
            s.split = Some(SplitMarks { train_end, val_end });
        }
        Ok(self)
    }

    pub fn with_values(&self, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != self.series.len() {
            return Err(Error::LengthMismatch { left: values.len(), right: self.series.len() });
        }
        let mut out = self.clone();
        for (s, v) in out.series.iter_mut().zip(values) {
            if v.len() != s.len() {
                return Err(Error::LengthMismatch { left: v.len(), right: s.len() });
            }
            s.values = v;
        }
        Ok(out)
    }
}

fn timestamp_overflow(id: &str) -> Error {
    Error::Parse { line: 0, message: format!("timestamps of series `{id}` overflow the calendar") }
}

pub fn format_rfc3339(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TimeKey {
    Step(i64),
    Time(NaiveDateTime),
}

impl TimeKey {
    fn parse(s: &str, line: usize) -> Result<Self> {
        if let Ok(step) = s.parse::<i64>() {
            return Ok(TimeKey::Step(step));
        }
        if let Ok(t) = DateTime::parse_from_rfc3339(s) {
            return Ok(TimeKey::Time(t.naive_utc()));
        }
        for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
            if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
                return Ok(TimeKey::Time(t));
            }
        }
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Ok(TimeKey::Time(d.and_hms_opt(0, 0, 0).expect("midnight")));
        }
        Err(Error::Parse { line, message: format!("unrecognized timestamp `{s}`") })
    }

    fn render(self) -> String {
        match self {
            TimeKey::Step(s) => s.to_string(),
            TimeKey::Time(t) => format_rfc3339(t),
        }
    }
}

struct RawSeries {
    id: String,
    rows: Vec<(TimeKey, f64, usize)>,
}

fn parse_value(cell: &str, line: usize) -> Result<f64> {
    if cell.is_empty() {
        return Err(Error::Parse { line, message: "missing value".into() });
    }
    let v: f64 = cell.parse().map_err(|_| Error::Parse { line, message: format!("invalid number `{cell}`") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("non-finite value `{cell}`") });
    }
    Ok(v)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse { line, message: format!("{kind:?}") },
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path)?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

/// Reads a long (`series_id,timestamp,value`) or wide (`timestamp,<id>...`) CSV file.
///
/// The sampling frequency is inferred from the timestamps when not given;
/// files using integer steps default to hourly.
pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat, granularity: Option<Granularity>) -> Result<TimeSeriesDataset> {
    let raw = match format {
        DataFormat::LongCsv => read_long(path.as_ref())?,
        DataFormat::WideCsv => read_wide(path.as_ref())?,
    };
    assemble(raw, granularity)
}

fn read_long(path: &Path) -> Result<Vec<RawSeries>> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header != ["series_id", "timestamp", "value"] {
        return Err(Error::Parse { line: 1, message: format!("expected header `series_id,timestamp,value`, found `{}`", header.join(",")) });
    }
    let mut groups: BTreeMap<String, Vec<(TimeKey, f64, usize)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec.get(0).unwrap_or_default();
        if id.is_empty() {
            return Err(Error::Parse { line, message: "missing series_id".into() });
        }
        let key = TimeKey::parse(rec.get(1).unwrap_or_default(), line)?;
        let value = parse_value(rec.get(2).unwrap_or_default(), line)?;
        groups.entry(id.to_string()).or_default().push((key, value, line));
    }
    Ok(groups.into_iter().map(|(id, rows)| RawSeries { id, rows }).collect())
}

fn read_wide(path: &Path) -> Result<Vec<RawSeries>> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header.len() < 2 || header[0] != "timestamp" {
        return Err(Error::Parse { line: 1, message: "expected header `timestamp,<id1>,<id2>,...`".into() });
    }
    let mut out: Vec<RawSeries> = header[1..].iter().map(|id| RawSeries { id: id.clone(), rows: Vec::new() }).collect();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let key = TimeKey::parse(rec.get(0).unwrap_or_default(), line)?;
        for (k, s) in out.iter_mut().enumerate() {
            let value = parse_value(rec.get(k + 1).unwrap_or_default(), line)?;
            s.rows.push((key, value, line));
        }
    }
    Ok(out)
}

fn assemble(mut raw: Vec<RawSeries>, granularity: Option<Granularity>) -> Result<TimeSeriesDataset> {
    if raw.is_empty() {
        return Err(Error::Parse { line: 1, message: "no data rows".into() });
    }
    let mut kind = None;
    for s in &mut raw {
        s.rows.sort_by_key(|r| r.0);
        if let Some(w) = s.rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateTimestamp { series: s.id.clone(), timestamp: w[0].0.render() });
        }
        for &(key, _, line) in &s.rows {
            let is_step = matches!(key, TimeKey::Step(_));
            if *kind.get_or_insert(is_step) != is_step {
                return Err(Error::Parse { line, message: "file mixes integer steps and calendar timestamps".into() });
            }
        }
    }
    let steps = kind == Some(true);
    let granularity = match granularity {
        Some(g) => g,
        None if steps => Granularity::Hourly,
        None => {
            let pair = raw.iter().find(|s| s.rows.len() >= 2).map(|s| (s.rows[0].0, s.rows[1].0));
            match pair {
                Some((TimeKey::Time(a), TimeKey::Time(b))) => Granularity::infer(a, b)?,
                _ => Granularity::Hourly,
            }
        }
    };
    let mut series = Vec::with_capacity(raw.len());
    for s in raw {
        let (start, start_step) = match s.rows[0].0 {
            TimeKey::Step(k) => (granularity.advance(step_origin(), k).ok_or_else(|| timestamp_overflow(&s.id))?, Some(k)),
            TimeKey::Time(t) => (t, None),
        };
        for (i, &(key, _, _)) in s.rows.iter().enumerate() {
            let ok = match key {
                TimeKey::Step(k) => Some(k) == start_step.map(|k0| k0 + i as i64),
                TimeKey::Time(t) => granularity.advance(start, i as i64) == Some(t),
            };
            if !ok {
                return Err(Error::NonUniformSpacing { series: s.id.clone(), index: i });
            }
        }
        series.push(Series { id: s.id, start, start_step, values: s.rows.iter().map(|r| r.1).collect(), split: None });
    }
    TimeSeriesDataset::new(granularity, series)
}

/// Writes the dataset as a long CSV.
pub fn write_long_csv(ds: &TimeSeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "series_id,timestamp,value")?;
    for (k, s) in ds.series().iter().enumerate() {
        for (i, v) in s.values.iter().enumerate() {
            writeln!(out, "{},{},{}", s.id, ds.label(k, i), v)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-series affine standardization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn transform(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }
}

/// Scalers keyed by series id, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerTable {
    pub ids: Vec<String>,
    pub scalers: Vec<Scaler>,
}

impl ScalerTable {
    pub fn get(&self, series: usize) -> Scaler {
        self.scalers[series]
    }

    pub fn len(&self) -> usize {
        self.scalers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scalers.is_empty()
    }

    /// Standardizes `ds` with these statistics; series ids must match.
    pub fn apply(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        let ids: Vec<&str> = ds.series().iter().map(|s| s.id.as_str()).collect();
        if ids != self.ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Checkpoint(format!("scaler table covers series {:?}, dataset has {:?}", self.ids, ids)));
        }
        let values = ds.series().iter().zip(&self.scalers).map(|(s, sc)| s.values.iter().map(|&v| sc.transform(v)).collect()).collect();
        ds.with_values(values)
    }
}

/// Standard deviations below this are treated as a constant series.
const STD_FLOOR: f64 = 1e-12;

/// Standardizes each series with training-split statistics (population std;
/// a constant training split falls back to std 1).
pub fn standardize(ds: &TimeSeriesDataset) -> Result<(TimeSeriesDataset, ScalerTable)> {
    let mut scalers = Vec::with_capacity(ds.n_series());
    let mut values = Vec::with_capacity(ds.n_series());
    for s in ds.series() {
        let train = s.span(Split::Train).ok_or_else(|| Error::EmptyTrainSplit(s.id.clone()))?;
        if train.is_empty() {
            return Err(Error::EmptyTrainSplit(s.id.clone()));
        }
        let x = &s.values[train];
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var.sqrt() > STD_FLOOR { var.sqrt() } else { 1.0 };
        let sc = Scaler { mean, std };
        values.push(s.values.iter().map(|&v| sc.transform(v)).collect());
        scalers.push(sc);
    }
    let ids = ds.series().iter().map(|s| s.id.clone()).collect();
    Ok((ds.with_values(values)?, ScalerTable { ids, scalers }))
}

/// One teacher-forced training window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub inputs: Vec<StepInput>,
    pub target: f64,
    pub target_index: usize,
}

/// Inputs for the `context + 1` steps ending at `target`: step `s` receives
/// the observed value at `s - 1`, except the first step whose lag is zero.
pub fn window_inputs(ds: &TimeSeriesDataset, series: usize, target: usize, context: usize) -> Vec<StepInput> {
    let values = &ds.series()[series].values;
    let first = target - context;
    (first..=target)
        .map(|s| {
            let lag = if s == first { 0.0 } else { values[s - 1] };
            ds.step_input(series, s, lag)
        })
        .collect()
}

/// `D` consecutive windows of one series whose newest target is `newest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiniBatch {
    pub series: usize,
    pub newest: usize,
    pub context: usize,
    pub depth: usize,
}

impl MiniBatch {
    /// Target index of window `k` (oldest first).
    pub fn target_index(&self, k: usize) -> usize {
        self.newest + 1 + k - self.depth
    }

    pub fn window(&self, ds: &TimeSeriesDataset, k: usize) -> Window {
        let target_index = self.target_index(k);
        Window {
            inputs: window_inputs(ds, self.series, target_index, self.context),
            target: ds.series()[self.series].values[target_index],
            target_index,
        }
    }

    pub fn windows(&self, ds: &TimeSeriesDataset) -> Vec<Window> {
        (0..self.depth).map(|k| self.window(ds, k)).collect()
    }

    pub fn targets(&self, ds: &TimeSeriesDataset) -> Vec<f64> {
        let v = &ds.series()[self.series].values;
        (0..self.depth).map(|k| v[self.target_index(k)]).collect()
    }
}

/// Number of mini-batches [`make_minibatches`] yields for a span starting at 0.
pub fn minibatch_count(len: usize, context: usize, depth: usize, stride: usize) -> usize {
    if len < context + depth || stride == 0 {
        0
    } else {
        (len - context - depth) / stride + 1
    }
}

/// Mini-batches of one series whose targets all lie in `span`; conditioning
/// prefixes may reach before the span start.
pub fn make_minibatches(ds: &TimeSeriesDataset, series: usize, span: Range<usize>, context: usize, depth: usize, stride: usize) -> Result<Vec<MiniBatch>> {
    if depth == 0 || stride == 0 {
        return Err(Error::Config(format!("mini-batch depth ({depth}) and stride ({stride}) must be positive")));
    }
    let s = &ds.series()[series];
    let end = span.end.min(s.len());
    let first = (span.start + depth - 1).max(context + depth - 1);
    if end < first + 1 {
        return Err(Error::SeriesTooShort { series: s.id.clone(), have: end, need: first + 1 });
    }
    Ok((first..end).step_by(stride).map(|newest| MiniBatch { series, newest, context, depth }).collect())
}

/// Mini-batches of every series within one split, in series order.
pub fn split_minibatches(ds: &TimeSeriesDataset, split: Split, context: usize, depth: usize, stride: usize) -> Result<Vec<MiniBatch>> {
    let mut out = Vec::new();
    for (k, s) in ds.series().iter().enumerate() {
        let span = s.span(split).ok_or_else(|| Error::EmptyTrainSplit(s.id.clone()))?;
        out.extend(make_minibatches(ds, k, span, context, depth, stride)?);
    }
    Ok(out)
}

/// Parameters of the synthetic sinusoid-plus-AR(1) generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_series: usize,
    pub length: usize,
    pub phi: f64,
    pub amplitude: f64,
    pub period: usize,
    pub noise_scale: f64,
    /// Mean level around which the per-series offsets are drawn.
    pub base_level: f64,
    /// Standard deviation of the per-series offsets.
    pub level_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_series: 8, length: 3000, phi: 0.8, amplitude: 1.0, period: 24, noise_scale: 1.0, base_level: 10.0, level_spread: 1.0, seed: 0 }
    }
}

/// A synthetic dataset together with its deterministic signal and noise parts.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: TimeSeriesDataset,
    pub signal: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

pub fn synth_ar(cfg: &SynthConfig) -> Result<TimeSeriesDataset> {
    Ok(synth_ar_components(cfg)?.dataset)
}

/// `z = amplitude·sin(2πt/period) + b_i + η_t` with stationary AR(1) noise of
/// standard deviation `noise_scale`, starting Monday 2024-01-01 00:00 hourly.
pub fn synth_ar_components(cfg: &SynthConfig) -> Result<SynthOutput> {
    if !(cfg.phi.abs() < 1.0) {
        return Err(Error::InvalidPhi(cfg.phi));
    }
    if cfg.n_series == 0 || cfg.period == 0 {
        return Err(Error::Config("synthetic data needs at least one series and a positive period".into()));
    }
    if cfg.length < 10 * cfg.period {
        return Err(Error::Config(format!("length {} must be at least 10 periods ({})", cfg.length, 10 * cfg.period)));
    }
    if !(cfg.noise_scale >= 0.0) || !cfg.amplitude.is_finite() || !cfg.base_level.is_finite() || !(cfg.level_spread >= 0.0) {
        return Err(Error::Config("synthetic amplitude, levels, and noise scale must be finite and nonnegative where applicable".into()));
    }
    let innovation = (1.0 - cfg.phi * cfg.phi).sqrt() * cfg.noise_scale;
    let width = (cfg.n_series - 1).to_string().len();
    let mut series = Vec::with_capacity(cfg.n_series);
    let mut signals = Vec::with_capacity(cfg.n_series);
    let mut noises = Vec::with_capacity(cfg.n_series);
    for i in 0..cfg.n_series {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let offset = cfg.base_level + cfg.level_spread * rng.sample::<f64, _>(StandardNormal);
        let mut eta = cfg.noise_scale * rng.sample::<f64, _>(StandardNormal);
        let mut signal = Vec::with_capacity(cfg.length);
        let mut noise = Vec::with_capacity(cfg.length);
        for t in 0..cfg.length {
            if t > 0 {
                eta = cfg.phi * eta + innovation * rng.sample::<f64, _>(StandardNormal);
            }
            let phase = 2.0 * std::f64::consts::PI * t as f64 / cfg.period as f64;
            signal.push(cfg.amplitude * phase.sin() + offset);
            noise.push(eta);
        }
        series.push(Series {
            id: format!("s{i:0width$}"),
            start: step_origin(),
            start_step: None,
            values: signal.iter().zip(&noise).map(|(a, b)| a + b).collect(),
            split: None,
        });
        signals.push(signal);
        noises.push(noise);
    }
    Ok(SynthOutput { dataset: TimeSeriesDataset::new(Granularity::Hourly, series)?, signal: signals, noise: noises })
}
