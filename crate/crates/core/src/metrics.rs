//! Point and probabilistic forecast scores.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::ObservationModel;
use crate::error::{Error, Result};
use crate::filter::{log_add_exp, log_step_density};
use crate::grid::BeliefDensity;

pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

pub fn point_errors(forecast: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if forecast.len() != truth.len() {
        return Err(Error::LengthMismatch { left: forecast.len(), right: truth.len() });
    }
    if forecast.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let n = forecast.len() as f64;
    let (abs, sq) = forecast.iter().zip(truth).fold((0.0, 0.0), |(a, s), (f, y)| {
        let e = f - y;
        (a + e.abs(), s + e * e)
    });
    Ok((abs / n, (sq / n).sqrt()))
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `(1/S) Σ|x_i − y| − (1/(2S²)) Σ_i Σ_j |x_i − x_j|`, evaluated in `O(S log S)`.
pub fn crps_ensemble(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let s = sorted(samples);
    Ok(crps_sorted(&s, y))
}

fn crps_sorted(s: &[f64], y: f64) -> f64 {
    let n = s.len() as f64;
    // both sums run on offsets from the first member, so a degenerate
    // ensemble gives exactly |x − y|
    let m = (s[0] - y).abs();
    let first = m + s.iter().map(|x| (x - y).abs() - m).sum::<f64>() / n;
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − S + 1) x_(i)
    let spread: f64 = s.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - n + 1.0) * (x - s[0])).sum();
    first - spread / (n * n)
}

/// Gaussian log density at `y` with the ensemble's mean and unbiased variance plus `var_floor`.
pub fn loglik_ensemble(samples: &[f64], y: f64, var_floor: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::EmptyEnsemble);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) + var_floor;
    Ok(-0.5 * (2.0 * std::f64::consts::PI * var).ln() - (y - mean) * (y - mean) / (2.0 * var))
}

/// Quantile of sorted data by linear interpolation between order statistics
/// at position `p (S − 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn quantile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParam(format!("quantile level {p} outside [0, 1]")));
    }
    Ok(quantile_sorted(&sorted(samples), p))
}

fn covers(sorted: &[f64], y: f64) -> bool {
    y >= quantile_sorted(sorted, 0.05) && y <= quantile_sorted(sorted, 0.95)
}

/// Fraction of `(ensemble, truth)` pairs where the truth lies in the closed
/// interval between the 5th and 95th percentiles.
pub fn cov90(ensembles: &[Vec<f64>], truths: &[f64]) -> Result<f64> {
    if ensembles.len() != truths.len() {
        return Err(Error::LengthMismatch { left: ensembles.len(), right: truths.len() });
    }
    if ensembles.is_empty() || ensembles.iter().any(|e| e.is_empty()) {
        return Err(Error::EmptyEnsemble);
    }
    let hits = ensembles.iter().zip(truths).filter(|(e, y)| covers(&sorted(e), **y)).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Column names follow the usual forecasting-table headers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "MAE")]
    pub mae: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    #[serde(rename = "CRPS")]
    pub crps: f64,
    #[serde(rename = "LogLik")]
    pub loglik: f64,
    #[serde(rename = "Cov90")]
    pub cov90: f64,
    pub n_windows: usize,
    pub horizon: usize,
}

impl MetricReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Scores of one window, per horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepScores {
    pub abs_err: Vec<f64>,
    pub sq_err: Vec<f64>,
    pub crps: Vec<f64>,
    pub loglik: Vec<f64>,
    pub covered: Vec<bool>,
}

/// Score one window. `trajectories` is `S × N`, `truth` has length `N`.
pub fn score_window(trajectories: &[Vec<f64>], truth: &[f64], var_floor: f64) -> Result<StepScores> {
    if trajectories.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let n = truth.len();
    if let Some(bad) = trajectories.iter().find(|t| t.len() != n) {
        return Err(Error::LengthMismatch { left: bad.len(), right: n });
    }
    let mut out = StepScores {
        abs_err: Vec::with_capacity(n),
        sq_err: Vec::with_capacity(n),
        crps: Vec::with_capacity(n),
        loglik: Vec::with_capacity(n),
        covered: Vec::with_capacity(n),
    };
    let s = trajectories.len() as f64;
    for (step, y) in truth.iter().enumerate() {
        let column: Vec<f64> = trajectories.iter().map(|t| t[step]).collect();
        let mean = column.iter().sum::<f64>() / s;
        let col_sorted = sorted(&column);
        out.abs_err.push((mean - y).abs());
        out.sq_err.push((mean - y) * (mean - y));
        out.crps.push(crps_sorted(&col_sorted, *y));
        out.loglik.push(loglik_ensemble(&column, *y, var_floor)?);
        out.covered.push(covers(&col_sorted, *y));
    }
    Ok(out)
}

/// Average per-(window, step) scores uniformly over all pairs.
pub fn aggregate(windows: &[StepScores]) -> Result<MetricReport> {
    let pairs: usize = windows.iter().map(|w| w.abs_err.len()).sum();
    if pairs == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let total = |f: &dyn Fn(&StepScores) -> f64| windows.iter().map(f).sum::<f64>() / pairs as f64;
    Ok(MetricReport {
        mae: total(&|w| w.abs_err.iter().sum()),
        rmse: total(&|w| w.sq_err.iter().sum()).sqrt(),
        crps: total(&|w| w.crps.iter().sum()),
        loglik: total(&|w| w.loglik.iter().sum()),
        cov90: total(&|w| w.covered.iter().filter(|c| **c).count() as f64),
        n_windows: windows.len(),
        horizon: windows.first().map(|w| w.abs_err.len()).unwrap_or(0),
    })
}

/// Score every ensemble against its target path and aggregate.
pub fn evaluate(ensembles: &[Vec<Vec<f64>>], targets: &[Vec<f64>], var_floor: f64) -> Result<(MetricReport, Vec<StepScores>)> {
    if ensembles.len() != targets.len() {
        return Err(Error::LengthMismatch { left: ensembles.len(), right: targets.len() });
    }
    let per_window = ensembles
        .iter()
        .zip(targets)
        .map(|(e, y)| score_window(e, y, var_floor))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&per_window)?, per_window))
}

/// Log of the model's one-step predictive density `Σ_j π_j Δθ p(dx | θ_j)`.
pub fn analytic_loglik(model: &ObservationModel, belief: &BeliefDensity, t: f64, x: f64, beta: f64, dx: f64, dt: f64) -> Result<f64> {
    if !belief.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let d = belief.grid().delta_theta();
    let quad = model.mark_quadrature();
    let acc = belief
        .grid()
        .nodes()
        .zip(belief.values())
        .filter(|(_, q)| **q > 0.0)
        .map(|(th, q)| (q * d).ln() + log_step_density(model.coeffs(t, x, beta, th), quad, dx, dt))
        .fold(f64::NEG_INFINITY, log_add_exp);
    if acc.is_finite() {
        Ok(acc)
    } else {
        Err(Error::NonFinite("analytic one-step log-likelihood".into()))
    }
}
