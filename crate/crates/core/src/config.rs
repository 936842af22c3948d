//! Run configuration: one TOML file with nested sections, plus dotted
//! `section.key=value` overrides applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::filter::SplitMode;
use crate::grid::LatentGrid;
use crate::metrics::DEFAULT_VAR_FLOOR;
use crate::oracle::{PfConfig, VerifyConfig};
use crate::sim::{LatentParams, ObsParams};
use crate::train::{BeliefMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub theta_min: f64,
    pub theta_max: f64,
    pub nodes: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { theta_min: -2.0, theta_max: 2.0, nodes: 401 }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<LatentGrid> {
        LatentGrid::new(self.theta_min, self.theta_max, self.nodes)
    }
}

/// Step size, window protocol and chronological split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub dt: f64,
    pub m: usize,
    pub n: usize,
    pub stride: usize,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { dt: 0.01, m: 300, n: 100, stride: 100, train_frac: 0.6, val_frac: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub steps: usize,
    pub theta0: f64,
    pub x0: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { steps: 20_000, theta0: 0.0, x0: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub split_mode: SplitMode,
    /// Small-jump truncation threshold; absent means no absorption.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Dump the full density every this many steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub samples: usize,
    pub quantiles: Vec<f64>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { samples: 100, quantiles: vec![0.05, 0.5, 0.95] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub belief: BeliefMode,
    #[serde(flatten)]
    pub optimizer: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { belief: BeliefMode::Filtered, optimizer: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub var_floor: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { var_floor: DEFAULT_VAR_FLOOR }
    }
}

/// CSV ingestion. Columns are looked up by header name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Decoder checkpoint (JSON) used instead of the `[decoder]` section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Empty means "use the row index".
    pub time_column: String,
    pub value_column: String,
    /// Spacing of the raw records in timestamp units; inferred when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_interval: Option<f64>,
    /// Bucket width for last-in-bucket resampling; absent means no resampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resample_interval: Option<f64>,
    /// Replace prices by `log s_t − log s_0`.
    pub log_relative: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            checkpoint: None,
            time_column: "t".into(),
            value_column: "x".into(),
            source_interval: None,
            resample_interval: None,
            log_relative: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    pub simulate: u64,
    pub forecast: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { simulate: 42, forecast: 42 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ParallelConfig {
    /// Worker threads; 0 lets the runtime pick.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub latent: LatentParams,
    pub decoder: Decoder,
    pub grid: GridConfig,
    pub window: WindowConfig,
    pub simulate: SimulateConfig,
    pub filter: FilterConfig,
    pub forecast: ForecastConfig,
    pub train: TrainSection,
    pub metrics: MetricsConfig,
    pub data: DataConfig,
    pub seeds: SeedConfig,
    pub parallel: ParallelConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            latent: LatentParams::default(),
            decoder: Decoder::Linear(ObsParams::default().into()),
            grid: GridConfig::default(),
            window: WindowConfig::default(),
            simulate: SimulateConfig::default(),
            filter: FilterConfig::default(),
            forecast: ForecastConfig::default(),
            train: TrainSection::default(),
            metrics: MetricsConfig::default(),
            data: DataConfig::default(),
            seeds: SeedConfig::default(),
            parallel: ParallelConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(config_err)?;
        Self::from_table(table)
    }

    /// Deserialize, rejecting keys that no field consumed.
    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table.clone()).try_into().map_err(config_err)?;
        let canonical = toml::Table::try_from(&cfg).map_err(config_err)?;
        if let Some(key) = unknown_key(&table, &canonical, "") {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Reads a TOML config, or the `config` field of a run manifest when the
    /// file ends in `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: crate::io::Manifest = serde_json::from_str(&text)?;
            Ok(m.config)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.to_toml_string()?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Apply `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(config_err)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("bad override key `{key}`")));
            }
            let value = parse_literal(raw.trim());
            let (last, parents) = path.split_last().expect("nonempty key");
            let mut table = &mut root;
            for p in parents {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        Self::from_table(root)
    }

    /// Checks every section against the preconditions of the code it feeds.
    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        self.decoder.validate()?;
        self.grid.build()?;
        let w = &self.window;
        if !(w.dt > 0.0 && w.dt.is_finite()) {
            return Err(Error::Config(format!("window.dt must be positive, got {}", w.dt)));
        }
        if w.m == 0 || w.n == 0 || w.stride == 0 {
            return Err(Error::Config("window.m, window.n and window.stride must be positive".into()));
        }
        crate::sim::chrono_split(10, w.train_frac, w.val_frac)?;
        if self.simulate.steps == 0 || !self.simulate.theta0.is_finite() || !self.simulate.x0.is_finite() {
            return Err(Error::Config("simulate.steps must be >= 1 and the start point finite".into()));
        }
        if let Some(eps) = self.filter.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!("filter.epsilon must be positive, got {eps}")));
            }
        }
        if self.forecast.samples == 0 {
            return Err(Error::Config("forecast.samples must be >= 1".into()));
        }
        if let Some(p) = self.forecast.quantiles.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("forecast quantile {p} outside (0, 1)")));
        }
        self.train.optimizer.validate()?;
        let names = self.decoder.raw_names();
        if let Some(bad) = self.train.optimizer.frozen.iter().find(|f| !names.contains(f)) {
            return Err(Error::Config(format!("train.frozen names `{bad}`, not one of {names:?}")));
        }
        if !(self.metrics.var_floor > 0.0 && self.metrics.var_floor.is_finite()) {
            return Err(Error::Config("metrics.var_floor must be positive".into()));
        }
        let d = &self.data;
        if d.value_column.is_empty() {
            return Err(Error::Config("data.value_column must be set".into()));
        }
        for (name, v) in [("source_interval", d.source_interval), ("resample_interval", d.resample_interval)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("data.{name} must be positive, got {v}")));
                }
            }
        }
        if let (Some(src), Some(dst)) = (d.source_interval, d.resample_interval) {
            if dst <= src {
                return Err(Error::Config(format!("data.resample_interval ({dst}) must exceed data.source_interval ({src})")));
            }
        }
        let v = &self.verify;
        if v.pf_seeds < 2 {
            return Err(Error::Config("verify.pf_seeds must be >= 2".into()));
        }
        if v.truncation_trials < 100 {
            return Err(Error::Config("verify.truncation_trials must be >= 100".into()));
        }
        if v.pf_burn_in >= v.pf_steps {
            return Err(Error::Config("verify.pf_burn_in must be below verify.pf_steps".into()));
        }
        PfConfig { n_particles: v.pf_particles, ..PfConfig::default() }.validate()?;
        Ok(())
    }

    /// Observation parameters for simulation. Only the linear family maps onto
    /// the generator.
    pub fn obs_params(&self) -> Result<ObsParams> {
        match &self.decoder {
            Decoder::Linear(p) => Ok(ObsParams { a1: p.a1, sigma_x: p.sigma_x, b1: p.b1, c_x: p.c_x }),
            Decoder::Poly(_) => Err(Error::Config("simulation and verification need decoder.family = \"linear\"".into())),
        }
    }
}

fn unknown_key(given: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in given {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => return Some(full),
            (toml::Value::Table(g), Some(toml::Value::Table(c))) => {
                if let Some(bad) = unknown_key(g, c, &full) {
                    return Some(bad);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
