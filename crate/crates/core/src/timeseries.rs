//! Ingestion of raw power time series and the day-by-sample matrix layout.

use std::collections::BTreeSet;
use std::io::Read;

use chrono::{DateTime, NaiveDateTime, Timelike};
use nalgebra::DMatrix;

use crate::error::{Result, ScsfError};

pub const SECONDS_PER_DAY: u32 = 86_400;

/// Fraction of peak power a row must average over the record to count as daytime.
pub const DEFAULT_NIGHT_FRACTION: f64 = 0.005;

/// Uniformly sampled power signal. `None` marks a missing sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries {
    pub start: NaiveDateTime,
    pub sample_period: u32,
    pub values: Vec<Option<f64>>,
}

impl PowerSeries {
    pub fn new(start: NaiveDateTime, sample_period: u32, values: Vec<Option<f64>>) -> Result<Self> {
        if sample_period == 0 || !SECONDS_PER_DAY.is_multiple_of(sample_period) {
            return Err(ScsfError::Config(format!(
                "sample period {sample_period}s does not divide one day"
            )));
        }
        Ok(PowerSeries { start, sample_period, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn samples_per_day(&self) -> usize {
        (SECONDS_PER_DAY / self.sample_period) as usize
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + chrono::Duration::seconds(index as i64 * self.sample_period as i64)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        (0..self.len()).map(|i| self.timestamp(i))
    }

    /// Position of the first sample within its day, in sample units.
    pub fn day_offset(&self) -> usize {
        (self.start.num_seconds_from_midnight() / self.sample_period) as usize
    }
}

/// Column selector for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSpec {
    Name(String),
    Index(usize),
}

impl ColumnSpec {
    /// Numeric strings select by zero-based index, anything else by header name.
    pub fn parse(s: &str) -> Self {
        match s.parse::<usize>() {
            Ok(i) => ColumnSpec::Index(i),
            Err(_) => ColumnSpec::Name(s.to_string()),
        }
    }

    fn resolve(&self, headers: &csv::StringRecord) -> Result<usize> {
        match self {
            ColumnSpec::Index(i) if *i < headers.len() => Ok(*i),
            ColumnSpec::Index(i) => Err(ScsfError::Ingest(format!(
                "column index {i} out of range ({} columns)",
                headers.len()
            ))),
            ColumnSpec::Name(name) => headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| ScsfError::Ingest(format!("no column named {name:?}"))),
        }
    }
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let s = raw.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return DateTime::from_timestamp(secs, 0).map(|d| d.naive_utc());
    }
    if let Ok(secs) = s.parse::<f64>() {
        if secs.is_finite() {
            let whole = secs.floor();
            let nanos = ((secs - whole) * 1e9).round() as u32;
            return DateTime::from_timestamp(whole as i64, nanos.min(999_999_999)).map(|d| d.naive_utc());
        }
    }
    // Offsets are dropped: samples are indexed by local clock time.
    if let Ok(d) = DateTime::parse_from_rfc3339(s) {
        return Some(d.naive_local());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S%:z", "%Y-%m-%d %H:%M:%S%z"] {
        if let Ok(d) = DateTime::parse_from_str(s, fmt) {
            return Some(d.naive_local());
        }
    }
    const FORMATS: [&str; 6] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
        "%Y/%m/%d %H:%M:%S",
        "%Y/%m/%d %H:%M",
    ];
    FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn parse_power(raw: &str) -> std::result::Result<Option<f64>, String> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(v) => Err(format!("non-finite power value {v}")),
        Err(_) => Err(format!("cannot parse power value {s:?}")),
    }
}

/// Read a CSV with a header row into a uniformly spaced [`PowerSeries`].
///
/// The sample period is the smallest spacing between consecutive rows; every
/// other spacing must be a whole multiple of it, and the gaps are filled with
/// missing markers.
pub fn ingest_csv<R: Read>(source: R, ts_col: &ColumnSpec, power_col: &ColumnSpec) -> Result<PowerSeries> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
    let headers = reader.headers()?.clone();
    let ts_idx = ts_col.resolve(&headers)?;
    let p_idx = power_col.resolve(&headers)?;

    let mut rows: Vec<(NaiveDateTime, Option<f64>, String)> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        // header is line 1
        let row = k + 2;
        let record = record?;
        let ts_raw = record
            .get(ts_idx)
            .ok_or_else(|| ScsfError::Row { row, message: "missing timestamp field".into() })?;
        let ts = parse_timestamp(ts_raw)
            .ok_or_else(|| ScsfError::Row { row, message: format!("cannot parse timestamp {ts_raw:?}") })?;
        let value = parse_power(record.get(p_idx).unwrap_or(""))
            .map_err(|message| ScsfError::Row { row, message })?;
        rows.push((ts, value, ts_raw.trim().to_string()));
    }
    if rows.is_empty() {
        return Err(ScsfError::Ingest("no data rows".into()));
    }

    let mut period: Option<i64> = None;
    for pair in rows.windows(2) {
        let dt = (pair[1].0 - pair[0].0).num_seconds();
        if dt == 0 {
            return Err(ScsfError::Timestamp { timestamp: pair[1].2.clone(), message: "duplicated timestamp".into() });
        }
        if dt < 0 {
            return Err(ScsfError::Timestamp { timestamp: pair[1].2.clone(), message: "timestamps out of order".into() });
        }
        period = Some(period.map_or(dt, |p| p.min(dt)));
    }
    let period = period.ok_or_else(|| ScsfError::Ingest("need at least two rows to infer the sample period".into()))?;
    if SECONDS_PER_DAY as i64 % period != 0 {
        return Err(ScsfError::Timestamp {
            timestamp: rows[1].2.clone(),
            message: format!("sample period {period}s does not divide one day"),
        });
    }

    let start = rows[0].0;
    let mut values = Vec::with_capacity(rows.len());
    for (ts, v, raw) in &rows {
        let offset = (*ts - start).num_seconds();
        if offset % period != 0 {
            return Err(ScsfError::Timestamp {
                timestamp: raw.clone(),
                message: format!("not on the {period}s sampling grid"),
            });
        }
        let idx = (offset / period) as usize;
        values.resize(idx, None);
        values.push(*v);
    }
    PowerSeries::new(start, period as u32, values)
}

/// Day-segmented power data: rows are intra-day samples, columns are days.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerMatrix {
    pub data: DMatrix<f64>,
    /// `true` where the sample was observed.
    pub observed: DMatrix<bool>,
    /// Sorted row indices that are dark over the whole record.
    pub night_rows: Vec<usize>,
}

impl PowerMatrix {
    /// Fully observed matrix; negatives are clamped and non-finite entries masked.
    pub fn from_dense(data: DMatrix<f64>) -> Self {
        let observed = data.map(|v| v.is_finite());
        Self::from_parts(data, observed)
    }

    /// Build from data and an observation mask. Unobserved entries become 0,
    /// negative observations are clamped to 0.
    pub fn from_parts(mut data: DMatrix<f64>, mut observed: DMatrix<bool>) -> Self {
        assert_eq!(data.shape(), observed.shape(), "data and mask shapes differ");
        for (v, o) in data.iter_mut().zip(observed.iter_mut()) {
            if !v.is_finite() {
                *o = false;
            }
            if !*o || *v < 0.0 {
                *v = 0.0;
            }
        }
        PowerMatrix { data, observed, night_rows: Vec::new() }
    }

    pub fn m(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn max_observed(&self) -> f64 {
        self.data.iter().fold(0.0, |a, &b| a.max(b))
    }

    /// ε = 0.005 · max(D) · n.
    pub fn default_night_epsilon(&self) -> f64 {
        DEFAULT_NIGHT_FRACTION * self.max_observed() * self.n() as f64
    }

    /// Recompute and store the night rows for threshold `epsilon`.
    pub fn with_night_rows(mut self, epsilon: f64) -> Self {
        self.night_rows = night_mask(&self, epsilon).into_iter().collect();
        self
    }

    pub fn is_night(&self, row: usize) -> bool {
        self.night_rows.binary_search(&row).is_ok()
    }

    pub fn day_rows(&self) -> Vec<usize> {
        (0..self.m()).filter(|&i| !self.is_night(i)).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

/// Reshape a series into an `m × n` matrix with one column per calendar day.
/// Partial leading and trailing days are padded with missing entries.
pub fn to_matrix(series: &PowerSeries) -> Result<PowerMatrix> {
    if series.is_empty() {
        return Err(ScsfError::Size("empty series".into()));
    }
    let m = series.samples_per_day();
    let offset = series.day_offset();
    let n = (offset + series.len()).div_ceil(m);
    let mut data = DMatrix::zeros(m, n);
    let mut observed = DMatrix::from_element(m, n, false);
    for (t, v) in series.values.iter().enumerate() {
        if let Some(v) = v {
            let pos = offset + t;
            data[(pos % m, pos / m)] = *v;
            observed[(pos % m, pos / m)] = true;
        }
    }
    Ok(PowerMatrix::from_parts(data, observed))
}

/// Rows whose observed sum over all days is at most `epsilon`.
pub fn night_mask(matrix: &PowerMatrix, epsilon: f64) -> BTreeSet<usize> {
    (0..matrix.m())
        .filter(|&i| {
            let sum: f64 = (0..matrix.n())
                .filter(|&j| matrix.observed[(i, j)])
                .map(|j| matrix.data[(i, j)])
                .sum();
            sum <= epsilon
        })
        .collect()
}

/// Column-major flattening: entry `(i, j)` lands at `j·m + i`.
pub fn flatten(matrix: &DMatrix<f64>) -> Vec<f64> {
    matrix.as_slice().to_vec()
}
