//! Python bindings. Structured results come back as plain dicts and lists.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use zakai_core::config::RunConfig as CoreConfig;
use zakai_core::filter::{build_kernel, ZakaiFilter};
use zakai_core::forecast::forecast_contexts;
use zakai_core::io::{preprocess_log_relative as core_log_relative, resample_last as core_resample, SeriesFile};
use zakai_core::train::{fit as core_fit, ObjectiveSetup};
use zakai_core::{metrics, oracle, sim, BeliefDensity, Decoder, Error, ObservationModel};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Resolved run configuration (TOML sections plus `section.key=value` overrides).
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: CoreConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (overrides = Vec::new()))]
    fn new(overrides: Vec<String>) -> PyResult<Self> {
        let inner = CoreConfig::default().with_overrides(&overrides).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::from_toml_str(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::load(path).map_err(to_py)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_overrides(&overrides).map_err(to_py)? })
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(dt={}, M={}, N={})", self.inner.window.dt, self.inner.window.m, self.inner.window.n)
    }
}

/// Split-step grid filter built from a config, optionally with a decoder
/// given as checkpoint JSON.
#[pyclass(name = "Filter")]
struct Filter {
    inner: ZakaiFilter,
}

#[pymethods]
impl Filter {
    #[new]
    #[pyo3(signature = (config = None, decoder_json = None))]
    fn new(config: Option<RunConfig>, decoder_json: Option<&str>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        cfg.validate().map_err(to_py)?;
        let decoder = match decoder_json {
            Some(s) => serde_json::from_str::<Decoder>(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => cfg.decoder.clone(),
        };
        let grid = cfg.grid.build().map_err(to_py)?;
        let kernel = build_kernel(&cfg.latent, cfg.window.dt, &grid).map_err(to_py)?;
        let model = ObservationModel::new(decoder, cfg.filter.epsilon).map_err(to_py)?;
        Ok(Self { inner: ZakaiFilter::new(kernel, model).with_mode(cfg.filter.split_mode) })
    }

    /// Grid nodes.
    fn nodes(&self) -> Vec<f64> {
        self.inner.grid().nodes().collect()
    }

    /// Filter `x` from the uniform belief. Returns per-step posterior means and
    /// modes plus the final density.
    fn run<'py>(&self, py: Python<'py>, x: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let grid = *self.inner.grid();
        let (state, trace) = py
            .detach(|| self.inner.filter_window_trace(&x, &BeliefDensity::uniform(grid), None))
            .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("post_mean", trace.rows.iter().map(|r| r.post_mean).collect::<Vec<_>>())?;
        d.set_item("post_mode", trace.rows.iter().map(|r| r.post_mode).collect::<Vec<_>>())?;
        d.set_item("density", state.q.values().to_vec())?;
        Ok(d)
    }

    /// Filter each context and roll out `samples` trajectories of `horizon`
    /// steps. Returns one `samples × horizon` list per context.
    #[pyo3(signature = (contexts, horizon, samples = 100, seed = 42, frozen_belief = false))]
    fn forecast(&self, py: Python<'_>, contexts: Vec<Vec<f64>>, horizon: usize, samples: usize, seed: u64, frozen_belief: bool) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let belief = if frozen_belief { zakai_core::train::BeliefMode::FrozenUniform } else { zakai_core::train::BeliefMode::Filtered };
        let ens = py
            .detach(|| forecast_contexts(&self.inner, &contexts, horizon, samples, belief, seed))
            .map_err(to_py)?;
        Ok(ens.into_iter().map(|e| e.trajectories).collect())
    }
}

/// Simulate one path; returns a dict with `t`, `theta`, `x`, `jump`.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn simulate<'py>(py: Python<'py>, config: Option<RunConfig>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    cfg.validate().map_err(to_py)?;
    let op = cfg.obs_params().map_err(to_py)?;
    let s = cfg.simulate;
    let p = sim::simulate_coupled(&cfg.latent, &op, s.theta0, s.x0, s.steps, cfg.window.dt, cfg.seeds.simulate).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("t", p.times)?;
    d.set_item("theta", p.theta)?;
    d.set_item("x", p.x)?;
    d.set_item("jump", p.jumps)?;
    Ok(d)
}

/// `(contexts, targets)` of the sliding-window protocol.
#[pyfunction]
fn sliding_windows(series: Vec<f64>, m: usize, n: usize, stride: usize) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let ds = sim::sliding_windows(&series, m, n, stride).map_err(to_py)?;
    Ok((ds.contexts, ds.targets))
}

#[pyfunction]
fn chrono_split(n_windows: usize, train_frac: f64, val_frac: f64) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let s = sim::chrono_split(n_windows, train_frac, val_frac).map_err(to_py)?;
    Ok((s.train, s.val, s.test))
}

/// Fit the configured decoder on full windows (`M + N + 1` points each).
/// Returns the fitted decoder and the training history.
#[pyfunction]
#[pyo3(signature = (config, train, val = Vec::new()))]
fn fit<'py>(py: Python<'py>, config: RunConfig, train: Vec<Vec<f64>>, val: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner;
    cfg.validate().map_err(to_py)?;
    let grid = cfg.grid.build().map_err(to_py)?;
    let kernel = build_kernel(&cfg.latent, cfg.window.dt, &grid).map_err(to_py)?;
    let mut setup = ObjectiveSetup::new(kernel, cfg.window.m, cfg.window.n);
    setup.kl_weight = cfg.train.optimizer.kl_weight;
    setup.mode = cfg.filter.split_mode;
    setup.belief = cfg.train.belief;
    setup.epsilon = cfg.filter.epsilon;
    let tr: Vec<&[f64]> = train.iter().map(|w| w.as_slice()).collect();
    let va: Vec<&[f64]> = val.iter().map(|w| w.as_slice()).collect();
    let r = py.detach(|| core_fit(&cfg.decoder, &tr, &va, &setup, &cfg.train.optimizer)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("decoder", json_to_py(py, &r.decoder)?)?;
    d.set_item("decoder_json", serde_json::to_string(&r.decoder).map_err(|e| PyValueError::new_err(e.to_string()))?)?;
    d.set_item("best_epoch", r.best_epoch)?;
    d.set_item("best_val", r.best_val)?;
    d.set_item("history", json_to_py(py, &r.history)?)?;
    Ok(d)
}

#[pyfunction]
fn crps_ensemble(samples: Vec<f64>, y: f64) -> PyResult<f64> {
    metrics::crps_ensemble(&samples, y).map_err(to_py)
}

#[pyfunction]
fn cov90(ensembles: Vec<Vec<f64>>, truths: Vec<f64>) -> PyResult<f64> {
    metrics::cov90(&ensembles, &truths).map_err(to_py)
}

/// MAE, RMSE, CRPS, LogLik and Cov90 over `windows × samples × horizon` ensembles.
#[pyfunction]
#[pyo3(signature = (ensembles, targets, var_floor = metrics::DEFAULT_VAR_FLOOR))]
fn evaluate<'py>(py: Python<'py>, ensembles: Vec<Vec<Vec<f64>>>, targets: Vec<Vec<f64>>, var_floor: f64) -> PyResult<Bound<'py, PyAny>> {
    let (report, _) = metrics::evaluate(&ensembles, &targets, var_floor).map_err(to_py)?;
    json_to_py(py, &report)
}

#[pyfunction]
fn preprocess_log_relative(series: Vec<f64>) -> PyResult<Vec<f64>> {
    core_log_relative(&series).map_err(to_py)
}

/// Last value per bucket. Returns `(timestamps, values, filled)`.
#[pyfunction]
#[pyo3(signature = (timestamps, values, interval, source_interval = None))]
fn resample_last(timestamps: Vec<f64>, values: Vec<f64>, interval: f64, source_interval: Option<f64>) -> PyResult<(Vec<f64>, Vec<f64>, usize)> {
    let s = SeriesFile::new(timestamps, values, source_interval).map_err(to_py)?;
    let (out, rep) = core_resample(&s, interval).map_err(to_py)?;
    Ok((out.timestamps, out.values, rep.filled))
}

#[pyfunction]
#[pyo3(signature = (trials = 500, seed = 42))]
fn check_truncation_bound<'py>(py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| oracle::check_truncation_bound(trials, seed)).map_err(to_py)?;
    json_to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (trials = 1000, seed = 42))]
fn check_norm_stability<'py>(py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| oracle::check_norm_stability(trials, seed)).map_err(to_py)?;
    json_to_py(py, &r)
}

/// Run the full verification suite with the config's `[verify]` section.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn verify<'py>(py: Python<'py>, config: Option<RunConfig>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    cfg.validate().map_err(to_py)?;
    let op = cfg.obs_params().map_err(to_py)?;
    let grid = cfg.grid.build().map_err(to_py)?;
    let r = py.detach(|| oracle::run_verify(&cfg.latent, &op, &grid, cfg.window.dt, &cfg.verify)).map_err(to_py)?;
    json_to_py(py, &r)
}

#[pymodule]
pub fn zakai(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("RNG_ALGORITHM", zakai_core::rng::RNG_ALGORITHM)?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Filter>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sliding_windows, m)?)?;
    m.add_function(wrap_pyfunction!(chrono_split, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(crps_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(cov90, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_log_relative, m)?)?;
    m.add_function(wrap_pyfunction!(resample_last, m)?)?;
    m.add_function(wrap_pyfunction!(check_truncation_bound, m)?)?;
    m.add_function(wrap_pyfunction!(check_norm_stability, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
