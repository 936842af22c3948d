//! Series ingestion, preprocessing and run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};

/// How gaps left by resampling were closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPolicy {
    /// Series used as read; no resampling happened.
    #[default]
    None,
    /// Empty buckets repeat the previous bucket's value.
    ForwardFill,
}

/// Timestamped observations. Timestamps are seconds since the epoch when the
/// file held datetimes, otherwise the numbers as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesFile {
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
    pub interval: f64,
    pub gap_policy: GapPolicy,
    pub filled: usize,
}

impl SeriesFile {
    /// Checks lengths, finiteness and strictly increasing timestamps.
    pub fn new(timestamps: Vec<f64>, values: Vec<f64>, interval: Option<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySeries);
        }
        if timestamps.len() != values.len() {
            return Err(Error::LengthMismatch { left: timestamps.len(), right: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("series value at row {i}")));
        }
        if let Some(i) = timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParam(format!("timestamps not strictly increasing at row {}", i + 1)));
        }
        let interval = match interval {
            Some(v) if v > 0.0 && v.is_finite() => v,
            Some(v) => return Err(Error::InvalidParam(format!("sampling interval must be positive, got {v}"))),
            None => smallest_spacing(&timestamps),
        };
        Ok(Self { timestamps, values, interval, gap_policy: GapPolicy::None, filled: 0 })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn smallest_spacing(ts: &[f64]) -> f64 {
    let d = ts.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if d.is_finite() {
        d
    } else {
        1.0
    }
}

fn parse_time(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<f64>() {
        return Some(v);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.timestamp() as f64 + t.timestamp_subsec_nanos() as f64 * 1e-9);
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y.%m.%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .map(|t| t.and_utc().timestamp() as f64)
}

/// Read two columns of a headed CSV. An empty `time_column` numbers rows 0, 1, 2, ….
pub fn read_series_csv(path: impl AsRef<Path>, time_column: &str, value_column: &str, interval: Option<f64>) -> Result<SeriesFile> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(std::io::BufReader::new(file));
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("{}: no column named `{name}`", path.display())))
    };
    let vcol = col(value_column)?;
    let tcol = if time_column.is_empty() { None } else { Some(col(time_column)?) };
    let mut ts = Vec::new();
    let mut vs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let v: f64 = field(vcol)
            .parse()
            .map_err(|_| Error::InvalidParam(format!("{}: row {}: bad value `{}`", path.display(), row + 1, field(vcol))))?;
        let t = match tcol {
            Some(c) => parse_time(field(c))
                .ok_or_else(|| Error::InvalidParam(format!("{}: row {}: bad timestamp `{}`", path.display(), row + 1, field(c))))?,
            None => row as f64,
        };
        ts.push(t);
        vs.push(v);
    }
    SeriesFile::new(ts, vs, interval)
}

/// `out[t] = log s[t] − log s[0]`.
pub fn preprocess_log_relative(series: &[f64]) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if let Some(index) = series.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::NonPositive { index });
    }
    let base = series[0].ln();
    Ok(series.iter().map(|v| v.ln() - base).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleReport {
    pub buckets: usize,
    pub filled: usize,
    /// Trailing records past the last complete bucket.
    pub dropped: usize,
}

/// Last observation per bucket `[t0 + k·I, t0 + (k+1)·I)`. Only complete
/// buckets are kept, so the output has `floor(span / I)` entries with
/// `span = t_last − t0 + source interval`. Empty buckets repeat the previous value.
pub fn resample_last(series: &SeriesFile, interval: f64) -> Result<(SeriesFile, ResampleReport)> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if !(interval > series.interval && interval.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "resample interval {interval} must exceed the source spacing {}",
            series.interval
        )));
    }
    // tolerance for timestamps that land a rounding error short of a bucket edge
    let tol = 1e-9;
    let t0 = series.timestamps[0];
    let span = series.timestamps[series.len() - 1] - t0 + series.interval;
    let buckets = (span / interval + tol).floor() as usize;
    if buckets == 0 {
        return Err(Error::TooShort { len: series.len(), need: (interval / series.interval).ceil() as usize });
    }
    let mut last: Vec<Option<f64>> = vec![None; buckets];
    let mut dropped = 0;
    for (t, v) in series.timestamps.iter().zip(&series.values) {
        let b = ((t - t0) / interval + tol).floor() as usize;
        match last.get_mut(b) {
            Some(slot) => *slot = Some(*v),
            None => dropped += 1,
        }
    }
    let mut filled = 0;
    let mut values = Vec::with_capacity(buckets);
    for slot in &last {
        match slot {
            Some(v) => values.push(*v),
            None => {
                // bucket 0 always holds the first record
                values.push(*values.last().expect("first bucket nonempty"));
                filled += 1;
            }
        }
    }
    let timestamps = (0..buckets).map(|k| t0 + k as f64 * interval).collect();
    let out = SeriesFile { timestamps, values, interval, gap_policy: GapPolicy::ForwardFill, filled };
    Ok((out, ResampleReport { buckets, filled, dropped }))
}

/// What was done to the raw file before modelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepReport {
    pub path: String,
    pub rows: usize,
    pub source_interval: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resample: Option<ResampleReport>,
    pub gap_policy: GapPolicy,
    pub log_relative: bool,
    pub length: usize,
}

/// Read, resample and transform a series as the data section says.
pub fn load_series(path: impl AsRef<Path>, data: &DataConfig) -> Result<(SeriesFile, PrepReport)> {
    let path = path.as_ref();
    let raw = read_series_csv(path, &data.time_column, &data.value_column, data.source_interval)?;
    let rows = raw.len();
    let source_interval = raw.interval;
    let (mut series, resample) = match data.resample_interval {
        Some(i) => {
            let (s, r) = resample_last(&raw, i)?;
            (s, Some(r))
        }
        None => (raw, None),
    };
    if data.log_relative {
        series.values = preprocess_log_relative(&series.values)?;
    }
    let report = PrepReport {
        path: path.display().to_string(),
        rows,
        source_interval,
        resample,
        gap_policy: series.gap_policy,
        log_relative: data.log_relative,
        length: series.len(),
    };
    Ok((series, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

impl InputRecord {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = Sha256::digest(&bytes);
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { path: path.display().to_string(), sha256 })
    }
}

/// Everything needed to rerun a command: the resolved config, every seed in
/// play, the RNG and the inputs it read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub rng_algorithm: String,
    pub vol_map: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: RunConfig,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let seeds = BTreeMap::from([
            ("simulate".to_string(), config.seeds.simulate),
            ("forecast".to_string(), config.seeds.forecast),
            ("train".to_string(), config.train.optimizer.seed),
            ("verify".to_string(), config.verify.seed),
            ("verify_convergence".to_string(), config.verify.convergence_seed),
        ]);
        Self {
            tool: "zakai".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            rng_algorithm: crate::rng::RNG_ALGORITHM.into(),
            vol_map: crate::decoder::VOL_MAP.into(),
            seeds,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Window protocol and split used by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub stride: usize,
    pub n_windows: usize,
    /// Series index of each window's first observation.
    pub starts: Vec<usize>,
    pub split: crate::sim::Split,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }
}
