//! Euler–Maruyama simulation of the coupled latent/observed jump-diffusion
//! and sliding-window dataset construction.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Ornstein–Uhlenbeck latent dynamics `dΘ = κ(θ̄ − Θ)dt + σ_θ dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    pub kappa: f64,
    pub theta_bar: f64,
    pub sigma_theta: f64,
}

impl LatentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParam(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.sigma_theta >= 0.0 && self.sigma_theta.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "sigma_theta must be >= 0, got {}",
                self.sigma_theta
            )));
        }
        if !self.theta_bar.is_finite() {
            return Err(Error::InvalidParam("theta_bar must be finite".into()));
        }
        Ok(())
    }
}

impl Default for LatentParams {
    fn default() -> Self {
        Self { kappa: 0.5, theta_bar: 0.0, sigma_theta: 0.3 }
    }
}

/// Observation dynamics `dX = a1 Θ dt + σ_x dW + c_x dN`, with `N` driven by
/// intensity `(b1 Θ)⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsParams {
    pub a1: f64,
    pub sigma_x: f64,
    pub b1: f64,
    pub c_x: f64,
}

impl ObsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x >= 0.0 && self.sigma_x.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma_x must be >= 0, got {}", self.sigma_x)));
        }
        if !(self.a1.is_finite() && self.b1.is_finite() && self.c_x.is_finite()) {
            return Err(Error::InvalidParam("observation parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn intensity(&self, theta: f64) -> f64 {
        (self.b1 * theta).max(0.0)
    }
}

impl Default for ObsParams {
    fn default() -> Self {
        Self { a1: 1.0, sigma_x: 0.1, b1: 1.5, c_x: -0.2 }
    }
}

/// One simulated trajectory. `jumps[k]` counts jumps in the step ending at `times[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPath {
    pub times: Vec<f64>,
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
    pub jumps: Vec<u32>,
    pub jump_times: Vec<f64>,
}

impl SimPath {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Writes `t,theta,x,jump` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "t,theta,x,jump").map_err(io)?;
        for k in 0..self.len() {
            writeln!(w, "{},{},{},{}", self.times[k], self.theta[k], self.x[k], self.jumps[k]).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Euler–Maruyama path of length `steps + 1` starting at `(theta0, x0)`.
///
/// Per step the generator draws, in order: the latent normal, the observation
/// normal, then the Poisson jump count (only when the intensity is positive).
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled(
    lp: &LatentParams,
    op: &ObsParams,
    theta0: f64,
    x0: f64,
    steps: usize,
    dt: f64,
    seed: u64,
) -> Result<SimPath> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParam(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(Error::InvalidParam("steps must be >= 1".into()));
    }
    lp.validate()?;
    op.validate()?;

    let mut rng = rng::stream(seed, 0);
    let sqrt_dt = dt.sqrt();
    let mut path = SimPath {
        times: Vec::with_capacity(steps + 1),
        theta: Vec::with_capacity(steps + 1),
        x: Vec::with_capacity(steps + 1),
        jumps: Vec::with_capacity(steps + 1),
        jump_times: Vec::new(),
    };
    let (mut theta, mut x) = (theta0, x0);
    path.times.push(0.0);
    path.theta.push(theta);
    path.x.push(x);
    path.jumps.push(0);
    for k in 0..steps {
        let xi: f64 = rng.sample(StandardNormal);
        let zeta: f64 = rng.sample(StandardNormal);
        let rate = op.intensity(theta) * dt;
        let count = if rate > 0.0 {
            Poisson::new(rate)
                .map_err(|e| Error::InvalidParam(format!("poisson rate {rate}: {e}")))?
                .sample(&mut rng) as u32
        } else {
            0
        };
        let t_next = (k + 1) as f64 * dt;
        let theta_next = theta + lp.kappa * (lp.theta_bar - theta) * dt + lp.sigma_theta * sqrt_dt * xi;
        x += op.a1 * theta * dt + op.sigma_x * sqrt_dt * zeta + op.c_x * count as f64;
        theta = theta_next;
        for _ in 0..count {
            path.jump_times.push(t_next);
        }
        path.times.push(t_next);
        path.theta.push(theta);
        path.x.push(x);
        path.jumps.push(count);
    }
    Ok(path)
}

/// Contiguous context/target windows cut from one series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    /// Each context holds `m + 1` observations.
    pub contexts: Vec<Vec<f64>>,
    /// Each target holds the `n` observations following its context.
    pub targets: Vec<Vec<f64>>,
    /// Index into the source series of each context's first observation.
    pub starts: Vec<usize>,
    pub m: usize,
    pub n: usize,
    pub stride: usize,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Context followed by target: `m + n + 1` observations.
    pub fn full_window(&self, i: usize) -> Vec<f64> {
        let mut w = self.contexts[i].clone();
        w.extend_from_slice(&self.targets[i]);
        w
    }

    pub fn subset(&self, idx: &[usize]) -> WindowDataset {
        WindowDataset {
            contexts: idx.iter().map(|&i| self.contexts[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
            m: self.m,
            n: self.n,
            stride: self.stride,
        }
    }
}

/// Window `i` covers series indices `[i*stride, i*stride + m + n]`.
pub fn sliding_windows(series: &[f64], m: usize, n: usize, stride: usize) -> Result<WindowDataset> {
    if m == 0 || n == 0 || stride == 0 {
        return Err(Error::InvalidParam("m, n and stride must be positive".into()));
    }
    let need = m + n + 1;
    if series.len() < need {
        return Err(Error::TooShort { len: series.len(), need });
    }
    let count = (series.len() - need) / stride + 1;
    let mut ds = WindowDataset {
        contexts: Vec::with_capacity(count),
        targets: Vec::with_capacity(count),
        starts: Vec::with_capacity(count),
        m,
        n,
        stride,
    };
    for i in 0..count {
        let s = i * stride;
        ds.contexts.push(series[s..=s + m].to_vec());
        ds.targets.push(series[s + m + 1..s + need].to_vec());
        ds.starts.push(s);
    }
    Ok(ds)
}

/// Chronological train/validation/test index split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Validation and test sizes are floored; the remainder goes to training.
pub fn chrono_split(n_windows: usize, train_frac: f64, val_frac: f64) -> Result<Split> {
    let ok = |f: f64| f > 0.0 && f < 1.0;
    if !ok(train_frac) || !ok(val_frac) || train_frac + val_frac >= 1.0 {
        return Err(Error::BadFraction { train: train_frac, val: val_frac });
    }
    let test_frac = 1.0 - train_frac - val_frac;
    // guard against 5 * 0.19999999999999996 flooring to 0
    let floor = |x: f64| (x + 1e-9).floor() as usize;
    let n_val = floor(n_windows as f64 * val_frac);
    let n_test = floor(n_windows as f64 * test_frac);
    let n_train = n_windows - n_val - n_test;
    if n_val == 0 || n_test == 0 {
        log::warn!("chronological split of {n_windows} windows leaves an empty validation or test set");
    }
    Ok(Split {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n_windows).collect(),
    })
}
