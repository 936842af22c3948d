//! Independent checks on the grid filter: a bootstrap particle filter, a
//! Kalman filter for the jump-free linear case, a self-convergence study and
//! randomized audits of the jump-truncation and normalization bounds.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, JumpMarkDist, LinearDecoderParams, ObservationModel, PolyDecoderParams};
use crate::error::{Error, Result};
use crate::filter::{build_kernel, c_step, exact_c_oracle, log_add_exp, FilterState, StepContext, ZakaiFilter};
use crate::grid::{l1_norm_diff, normalize, BeliefDensity, LatentGrid};
use crate::rng;
use crate::sim::{simulate_coupled, LatentParams, ObsParams};

/// Largest jump count kept in the particle weights.
pub const PF_MAX_JUMPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfConfig {
    pub n_particles: usize,
    pub resample_threshold: f64,
    pub seed: u64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self { n_particles: 100_000, resample_threshold: 0.5, seed: 42 }
    }
}

impl PfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 100 {
            return Err(Error::InvalidParam(format!("need at least 100 particles, got {}", self.n_particles)));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::InvalidParam(format!("resample_threshold must lie in (0, 1], got {}", self.resample_threshold)));
        }
        Ok(())
    }
}

/// Per-step output of [`bootstrap_pf`]. Entry `k` describes `θ_{k+1}` after
/// the increment `x_{k+1} - x_k` has been absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct PfRun {
    pub histograms: Vec<BeliefDensity>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Effective sample size right after weighting.
    pub ess: Vec<f64>,
    pub resamples: usize,
}

/// `ln Σ_{n ≤ PF_MAX_JUMPS} Pois(n; λΔt) N(dx; a θ Δt + n c, σ²Δt)`.
fn log_pf_density(op: &ObsParams, theta: f64, dx: f64, dt: f64) -> f64 {
    let var = op.sigma_x * op.sigma_x * dt;
    let mean = op.a1 * theta * dt;
    let lh = op.intensity(theta) * dt;
    let gauss = |m: f64| {
        let d = dx - m;
        -0.5 * (std::f64::consts::TAU * var).ln() - d * d / (2.0 * var)
    };
    if lh <= 0.0 {
        return gauss(mean);
    }
    let mut acc = f64::NEG_INFINITY;
    let mut log_pois = -lh;
    for n in 0..=PF_MAX_JUMPS {
        if n > 0 {
            log_pois += lh.ln() - (n as f64).ln();
        }
        acc = log_add_exp(acc, log_pois + gauss(mean + n as f64 * op.c_x));
    }
    acc
}

fn sample_from_belief(init: &BeliefDensity, n: usize, r: &mut rng::Rng) -> Vec<f64> {
    let grid = init.grid();
    let d = grid.delta_theta();
    let mut acc = 0.0;
    let cdf: Vec<f64> = init.probabilities().into_iter().map(|p| { acc += p; acc }).collect();
    let total = cdf[cdf.len() - 1];
    (0..n)
        .map(|_| {
            let u = r.random::<f64>() * total;
            let j = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
            grid.node(j) + (r.random::<f64>() - 0.5) * d
        })
        .collect()
}

pub fn systematic_resample(particles: &[f64], weights: &[f64], u0: f64) -> Vec<f64> {
    let n = particles.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for m in 0..n {
        let u = (m as f64 + u0) / n as f64;
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(particles[i]);
    }
    out
}

/// Bootstrap particle filter on the observation levels `observations`.
/// Particles start from `init` (nodes jittered uniformly within their cell),
/// are weighted by the multi-jump one-step density, resampled systematically
/// when the ESS drops below `resample_threshold · n`, then moved by one Euler
/// step of the latent dynamics.
pub fn bootstrap_pf(
    lp: &LatentParams,
    op: &ObsParams,
    observations: &[f64],
    dt: f64,
    init: &BeliefDensity,
    cfg: &PfConfig,
) -> Result<PfRun> {
    cfg.validate()?;
    lp.validate()?;
    op.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParam(format!("dt must be positive, got {dt}")));
    }
    if observations.len() < 2 {
        return Err(Error::WindowTooShort { len: observations.len(), need: 2 });
    }
    let grid = *init.grid();
    let n = cfg.n_particles;
    let mut r = rng::stream(cfg.seed, 0);
    let mut particles = sample_from_belief(init, n, &mut r);
    let mut weights = vec![1.0 / n as f64; n];
    let steps = observations.len() - 1;
    let mut run = PfRun {
        histograms: Vec::with_capacity(steps),
        means: Vec::with_capacity(steps),
        variances: Vec::with_capacity(steps),
        ess: Vec::with_capacity(steps),
        resamples: 0,
    };
    let sqrt_dt = dt.sqrt();
    for (k, w) in observations.windows(2).enumerate() {
        let dx = w[1] - w[0];
        let logl: Vec<f64> = particles.par_iter().map(|th| log_pf_density(op, *th, dx, dt)).collect();
        // raw likelihoods all below the smallest positive double
        if !(logl.iter().copied().fold(f64::NEG_INFINITY, f64::max) >= f64::MIN_POSITIVE.ln()) {
            return Err(Error::Degeneracy { step: k });
        }
        let logw: Vec<f64> = logl.iter().zip(&weights).map(|(l, w)| w.ln() + l).collect();
        let peak = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        weights = logw.par_iter().map(|l| (l - peak).exp()).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Degeneracy { step: k });
        }
        weights.iter_mut().for_each(|v| *v /= total);
        let ess = 1.0 / weights.iter().map(|v| v * v).sum::<f64>();
        run.ess.push(ess);
        if ess < cfg.resample_threshold * n as f64 {
            particles = systematic_resample(&particles, &weights, r.random::<f64>());
            weights.iter_mut().for_each(|v| *v = 1.0 / n as f64);
            run.resamples += 1;
        }
        for th in particles.iter_mut() {
            let xi: f64 = r.sample(StandardNormal);
            *th += lp.kappa * (lp.theta_bar - *th) * dt + lp.sigma_theta * sqrt_dt * xi;
        }
        let mean: f64 = particles.iter().zip(&weights).map(|(t, w)| t * w).sum();
        let var: f64 = particles.iter().zip(&weights).map(|(t, w)| w * (t - mean) * (t - mean)).sum();
        let mut hist = vec![0.0; grid.len()];
        for (t, w) in particles.iter().zip(&weights) {
            hist[grid.nearest(*t)] += w;
        }
        hist.iter_mut().for_each(|v| *v /= grid.delta_theta());
        run.histograms.push(normalize(&BeliefDensity::from_values(grid, hist)?)?);
        run.means.push(mean);
        run.variances.push(var);
    }
    Ok(run)
}

/// Predictive moments of `θ_{k+1}` after absorbing increment `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrace {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Exact filter for the jump-free linear model discretized by Euler steps.
pub fn kalman_filter(lp: &LatentParams, op: &ObsParams, observations: &[f64], dt: f64, m0: f64, p0: f64) -> Result<KalmanTrace> {
    lp.validate()?;
    op.validate()?;
    if op.b1 != 0.0 {
        return Err(Error::InvalidParam("the Kalman filter needs a jump-free model (b1 = 0)".into()));
    }
    if observations.len() < 2 {
        return Err(Error::WindowTooShort { len: observations.len(), need: 2 });
    }
    let h = op.a1 * dt;
    let r = op.sigma_x * op.sigma_x * dt;
    let q = lp.sigma_theta * lp.sigma_theta * dt;
    let phi = 1.0 - lp.kappa * dt;
    let (mut m, mut p) = (m0, p0);
    let mut out = KalmanTrace { means: Vec::new(), variances: Vec::new() };
    for w in observations.windows(2) {
        let dx = w[1] - w[0];
        let s = h * h * p + r;
        let gain = p * h / s;
        m += gain * (dx - h * m);
        p *= 1.0 - gain * h;
        m = phi * m + lp.kappa * lp.theta_bar * dt;
        p = phi * phi * p + q;
        out.means.push(m);
        out.variances.push(p);
    }
    Ok(out)
}

fn linear_filter(lp: &LatentParams, op: &ObsParams, dt: f64, grid: &LatentGrid) -> Result<ZakaiFilter> {
    let kernel = build_kernel(lp, dt, grid)?;
    let model = ObservationModel::new(Decoder::Linear(LinearDecoderParams::from(*op)), None)?;
    Ok(ZakaiFilter::new(kernel, model))
}

/// Grid-filter beliefs after every increment of `observations`.
pub fn filter_beliefs(filter: &ZakaiFilter, observations: &[f64], init: &BeliefDensity) -> Result<Vec<BeliefDensity>> {
    let mut state = FilterState::new(init.clone(), 0.0, observations[0])?;
    let mut out = Vec::with_capacity(observations.len().saturating_sub(1));
    for w in observations.windows(2) {
        state = filter.strang_update(&state, w[1] - w[0])?;
        out.push(state.q.clone());
    }
    Ok(out)
}

fn stationary_draw(lp: &LatentParams, seed: u64) -> f64 {
    let sd = if lp.kappa > 0.0 { lp.sigma_theta / (2.0 * lp.kappa).sqrt() } else { lp.sigma_theta };
    let mut r = rng::stream(seed, 1);
    let z: f64 = r.sample(StandardNormal);
    (lp.theta_bar + sd * z).clamp(-1.5, 1.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfAgreementReport {
    pub steps: usize,
    pub burn_in: usize,
    pub n_particles: usize,
    /// Mean per-step L¹ distance after burn-in, one entry per seed.
    pub per_seed: Vec<f64>,
    pub mean_l1: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Grid filter against the particle filter on freshly simulated windows, one
/// per seed, both started from the uniform belief.
#[allow(clippy::too_many_arguments)]
pub fn pf_agreement(
    lp: &LatentParams,
    op: &ObsParams,
    grid: &LatentGrid,
    dt: f64,
    steps: usize,
    burn_in: usize,
    seeds: &[u64],
    n_particles: usize,
) -> Result<PfAgreementReport> {
    if burn_in >= steps {
        return Err(Error::InvalidParam("burn-in must be shorter than the window".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidParam("need at least one seed".into()));
    }
    let filter = linear_filter(lp, op, dt, grid)?;
    let init = BeliefDensity::uniform(*grid);
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let path = simulate_coupled(lp, op, stationary_draw(lp, seed), 0.0, steps, dt, seed)?;
        let beliefs = filter_beliefs(&filter, &path.x, &init)?;
        let cfg = PfConfig { n_particles, seed: seed.wrapping_add(1_000_003), ..PfConfig::default() };
        let pf = bootstrap_pf(lp, op, &path.x, dt, &init, &cfg)?;
        let d: Vec<f64> = beliefs.iter().zip(&pf.histograms).skip(burn_in).map(|(a, b)| a.l1_distance(b)).collect();
        per_seed.push(d.iter().sum::<f64>() / d.len() as f64);
    }
    let mean_l1 = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let tolerance = 0.1;
    Ok(PfAgreementReport { steps, burn_in, n_particles, per_seed, mean_l1, tolerance, pass: mean_l1 <= tolerance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanAgreementReport {
    pub steps: usize,
    pub runs: usize,
    pub kalman_mean: f64,
    pub kalman_var: f64,
    pub pf_mean: f64,
    pub pf_var: f64,
    /// Monte Carlo standard errors of the run-averaged PF moments.
    pub se_mean: f64,
    pub se_var: f64,
    pub z_mean: f64,
    pub z_var: f64,
    /// Terminal mean of the grid filter, for reference.
    pub grid_mean: f64,
    pub grid_var: f64,
    pub pass: bool,
}

/// Jump-free linear model: terminal PF moments (averaged over independent PF
/// runs on one observation path) against the exact Kalman moments, both
/// started from `N(θ̄, prior_sd²)`.
#[allow(clippy::too_many_arguments)]
pub fn kalman_agreement(
    lp: &LatentParams,
    op: &ObsParams,
    grid: &LatentGrid,
    dt: f64,
    steps: usize,
    prior_sd: f64,
    seeds: &[u64],
    n_particles: usize,
) -> Result<KalmanAgreementReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidParam("need at least two PF runs for a standard error".into()));
    }
    let op = ObsParams { b1: 0.0, ..*op };
    let path = simulate_coupled(lp, &op, stationary_draw(lp, seeds[0]), 0.0, steps, dt, seeds[0])?;
    let kf = kalman_filter(lp, &op, &path.x, dt, lp.theta_bar, prior_sd * prior_sd)?;
    let init = BeliefDensity::gaussian(*grid, lp.theta_bar, prior_sd)?;
    let grid_run = filter_beliefs(&linear_filter(lp, &op, dt, grid)?, &path.x, &init)?;
    let last = grid_run.last().expect("at least one step");
    let mut means = Vec::with_capacity(seeds.len());
    let mut vars = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = PfConfig { n_particles, seed: seed.wrapping_add(2_000_003), ..PfConfig::default() };
        let pf = bootstrap_pf(lp, &op, &path.x, dt, &init, &cfg)?;
        means.push(*pf.means.last().expect("nonempty"));
        vars.push(*pf.variances.last().expect("nonempty"));
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = |v: &[f64]| {
        let m = avg(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt()
    };
    let (pf_mean, pf_var, se_mean, se_var) = (avg(&means), avg(&vars), se(&means), se(&vars));
    let kalman_mean = *kf.means.last().expect("nonempty");
    let kalman_var = *kf.variances.last().expect("nonempty");
    let z_mean = (pf_mean - kalman_mean) / se_mean;
    let z_var = (pf_var - kalman_var) / se_var;
    Ok(KalmanAgreementReport {
        steps,
        runs: seeds.len(),
        kalman_mean,
        kalman_var,
        pf_mean,
        pf_var,
        se_mean,
        se_var,
        z_mean,
        z_var,
        grid_mean: crate::grid::posterior_mean(last)?,
        grid_var: crate::grid::posterior_variance(last)?,
        pass: z_mean.abs() <= 3.0 && z_var.abs() <= 3.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub dt_levels: Vec<f64>,
    pub terminal_l1_errors: Vec<f64>,
    pub fitted_slope: f64,
    /// Number of simulated paths whose errors were averaged.
    pub paths: usize,
    /// Slope fitted to each path on its own.
    pub per_path_slopes: Vec<f64>,
}

impl ConvergenceReport {
    /// Columns `log_dt,log_error`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["log_dt", "log_error"])?;
        for (d, e) in self.dt_levels.iter().zip(&self.terminal_l1_errors) {
            w.write_record([d.ln().to_string(), e.ln().to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Least-squares slope of `ln err` against `ln dt`.
pub fn fit_slope(dt: &[f64], err: &[f64]) -> Result<f64> {
    if dt.len() != err.len() {
        return Err(Error::LengthMismatch { left: dt.len(), right: err.len() });
    }
    if dt.len() < 2 {
        return Err(Error::InvalidParam("need at least two points for a slope".into()));
    }
    if let Some(i) = dt.iter().chain(err).position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::NonPositive { index: i % dt.len() });
    }
    let xs: Vec<f64> = dt.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub theta_min: f64,
    pub theta_max: f64,
    pub grid_nodes: usize,
    pub t_end: f64,
    pub dt_levels: Vec<f64>,
    /// Reference step is the finest level divided by this.
    pub refine: usize,
    /// Independent paths whose terminal errors are averaged before the fit.
    pub paths: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            theta_min: -2.0,
            theta_max: 2.0,
            grid_nodes: 801,
            t_end: 1.0,
            dt_levels: vec![1.0 / 50.0, 1.0 / 100.0, 1.0 / 200.0, 1.0 / 400.0],
            refine: 8,
            paths: 20,
        }
    }
}

fn steps_for(t: f64, dt: f64) -> Result<usize> {
    let s = t / dt;
    let r = s.round();
    if r < 1.0 || (s - r).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::InvalidParam(format!("step {dt} does not divide the horizon {t}")));
    }
    Ok(r as usize)
}

/// Self-convergence of the split filter on one fine observation path `fine`
/// (levels at spacing `dt_fine`, covering the whole horizon). Each coarse run
/// sees the path subsampled to its own step; errors are terminal L¹ distances
/// to the run at `dt_fine`.
pub fn convergence_study(
    lp: &LatentParams,
    op: &ObsParams,
    fine: &[f64],
    dt_fine: f64,
    dt_levels: &[f64],
    grid: &LatentGrid,
) -> Result<ConvergenceReport> {
    if dt_levels.len() < 3 {
        return Err(Error::InvalidParam("need at least three step levels".into()));
    }
    for w in dt_levels.windows(2) {
        if ((w[0] / w[1]) - 2.0).abs() > 1e-9 {
            return Err(Error::InvalidParam("step levels must halve successively".into()));
        }
    }
    let t_end = (fine.len() - 1) as f64 * dt_fine;
    let init = BeliefDensity::uniform(*grid);
    let terminal = |dt: f64| -> Result<BeliefDensity> {
        let stride = steps_for(dt, dt_fine)?;
        steps_for(t_end, dt)?;
        let obs: Vec<f64> = fine.iter().step_by(stride).copied().collect();
        let f = linear_filter(lp, op, dt, grid)?;
        Ok(filter_beliefs(&f, &obs, &init)?.pop().expect("nonempty"))
    };
    let reference = terminal(dt_fine)?;
    let errors = dt_levels
        .iter()
        .map(|dt| terminal(*dt).map(|b| b.l1_distance(&reference)))
        .collect::<Result<Vec<f64>>>()?;
    let fitted_slope = fit_slope(dt_levels, &errors)?;
    Ok(ConvergenceReport { dt_levels: dt_levels.to_vec(), terminal_l1_errors: errors, fitted_slope, paths: 1, per_path_slopes: vec![fitted_slope] })
}

/// Runs [`convergence_study`] on `cfg.paths` simulated paths (seeds
/// `seed, seed + 1, ...`) and fits the slope to the path-averaged errors.
///
/// A single path mixes the scheme error with the information the coarse
/// levels lose by seeing only aggregated increments; that second part has a
/// random sign per path, so single-path slopes scatter widely.
pub fn convergence_study_simulated(lp: &LatentParams, op: &ObsParams, cfg: &ConvergenceConfig, seed: u64) -> Result<ConvergenceReport> {
    let finest = cfg.dt_levels.iter().copied().fold(f64::INFINITY, f64::min);
    if cfg.refine < 2 {
        return Err(Error::InvalidParam("refine must be at least 2".into()));
    }
    if cfg.paths == 0 {
        return Err(Error::InvalidParam("paths must be at least 1".into()));
    }
    let dt_fine = finest / cfg.refine as f64;
    let steps = steps_for(cfg.t_end, dt_fine)?;
    let grid = LatentGrid::new(cfg.theta_min, cfg.theta_max, cfg.grid_nodes)?;
    let runs = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|p| {
            let s = seed.wrapping_add(p);
            let path = simulate_coupled(lp, op, stationary_draw(lp, s), 0.0, steps, dt_fine, s)?;
            convergence_study(lp, op, &path.x, dt_fine, &cfg.dt_levels, &grid)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let errors: Vec<f64> = (0..cfg.dt_levels.len())
        .map(|i| runs.iter().map(|r| r.terminal_l1_errors[i]).sum::<f64>() / n)
        .collect();
    Ok(ConvergenceReport {
        dt_levels: cfg.dt_levels.clone(),
        fitted_slope: fit_slope(&cfg.dt_levels, &errors)?,
        terminal_l1_errors: errors,
        paths: runs.len(),
        per_path_slopes: runs.iter().map(|r| r.fitted_slope).collect(),
    })
}

/// Outcome of a randomized inequality audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest `lhs / rhs` over trials with a positive right-hand side.
    pub max_ratio: f64,
    /// Trial indices that violated the bound.
    pub violating_trials: Vec<usize>,
    pub pass: bool,
}

/// `2 (1 − e^{−x} (1 + x))`, twice the probability of two or more events
/// for a Poisson count with mean `x`.
pub fn truncation_bound(lambda_h: f64) -> f64 {
    2.0 * (-(-lambda_h).exp_m1() - lambda_h * (-lambda_h).exp())
}

struct TruncationTrial {
    q: BeliefDensity,
    model: ObservationModel,
    dx: f64,
    h: f64,
    lambda_max: f64,
    /// Jumps in the drawn increment.
    jumps: u64,
}

/// Mark families drawn by the truncation audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMarks {
    /// Linear decoders with point-mass marks and polynomial decoders with
    /// Gaussian marks, half each.
    #[default]
    Mixed,
    PointMass,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruncationOptions {
    pub max_lambda_h: f64,
    pub marks: TrialMarks,
}

impl Default for TruncationOptions {
    fn default() -> Self {
        Self { max_lambda_h: 0.2, marks: TrialMarks::Mixed }
    }
}

fn random_trial(grid: &LatentGrid, opts: &TruncationOptions, r: &mut rng::Rng) -> Result<TruncationTrial> {
    // belief: two-component Gaussian mixture
    let m1 = r.random_range(-1.5..1.5);
    let m2 = r.random_range(-1.5..1.5);
    let s1 = r.random_range(0.05..0.6);
    let s2 = r.random_range(0.05..0.6);
    let mix = r.random_range(0.0..1.0);
    let vals: Vec<f64> = grid
        .nodes()
        .map(|t| mix * (-0.5 * ((t - m1) / s1).powi(2)).exp() / s1 + (1.0 - mix) * (-0.5 * ((t - m2) / s2).powi(2)).exp() / s2)
        .collect();
    let q = normalize(&BeliefDensity::from_values(*grid, vals)?)?;

    let point_mass = match opts.marks {
        TrialMarks::Mixed => r.random_bool(0.5),
        TrialMarks::PointMass => true,
        TrialMarks::Gaussian => false,
    };
    let decoder = if point_mass {
        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        Decoder::Linear(LinearDecoderParams {
            a1: r.random_range(-2.0..2.0),
            sigma_x: r.random_range(0.02..0.5),
            b1: r.random_range(-4.0..4.0),
            c_x: sign * r.random_range(0.05..0.5),
        })
    } else {
        Decoder::Poly(PolyDecoderParams {
            drift_coeffs: vec![r.random_range(-0.5..0.5), r.random_range(-2.0..2.0)],
            vol_coeffs: vec![r.random_range(-4.0..-0.5), r.random_range(-0.5..0.5)],
            intensity_coeffs: vec![r.random_range(0.0..3.0), r.random_range(-2.0..2.0), r.random_range(0.0..1.0)],
            mark: JumpMarkDist::gaussian(r.random_range(-0.4..0.4), r.random_range(0.02..0.3)),
        })
    };
    let model = ObservationModel::new(decoder, None)?;
    let ctx = StepContext { t: 0.0, x: 0.0, beta: 0.0 };
    let lambda_max = grid
        .nodes()
        .zip(q.values())
        .filter(|(_, v)| **v > 0.0)
        .map(|(th, _)| model.coeffs(ctx.t, ctx.x, ctx.beta, th).lambda)
        .fold(0.0, f64::max);
    let h = if lambda_max > 0.0 {
        r.random_range(1e-3 * opts.max_lambda_h..=opts.max_lambda_h) / lambda_max
    } else {
        r.random_range(1e-3..0.1)
    }
    .min(1.0);

    // increment drawn from the model at a latent value drawn from the belief
    let th = sample_from_belief(&q, 1, r)[0];
    let c = model.coeffs(ctx.t, ctx.x, ctx.beta, th);
    let z: f64 = r.sample(StandardNormal);
    let mut dx = c.mu * h + c.sigma * h.sqrt() * z;
    let rate = c.lambda * h;
    let jumps = if rate > 0.0 { Poisson::new(rate).map(|p| p.sample(r) as u64).unwrap_or(0) } else { 0 };
    for _ in 0..jumps {
        dx += model.marks().sample(r);
    }
    Ok(TruncationTrial { q, model, dx, h, lambda_max, jumps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    #[serde(flatten)]
    pub audit: BoundReport,
    /// Trials whose drawn increment contained two or more jumps.
    pub multi_jump_trials: usize,
    pub violations_with_multi_jump: usize,
    /// Violations on trials with Gaussian marks, where the C-step integrates
    /// the mark law by Gauss–Hermite quadrature and the oracle convolves
    /// exactly.
    pub violations_with_gaussian_marks: usize,
    /// Trial averages of the two sides.
    pub mean_distance: f64,
    pub mean_bound: f64,
}

/// Randomized audit of `‖exact − c_step‖₁ ≤ 2 (1 − e^{−λ_max h}(1 + λ_max h))`
/// with `λ_max h ≤ 0.2`. Increments are drawn from the model itself.
///
/// The bound is on the prior probability of two or more jumps, while the L¹
/// gap is controlled by their posterior probability given `dx`, so an
/// increment that really contains several jumps (or sits in a tail the
/// multi-jump law explains better) can exceed it. Such trials are counted
/// separately.
pub fn check_truncation_bound(trials: usize, seed: u64) -> Result<TruncationReport> {
    check_truncation_bound_with(trials, seed, &TruncationOptions::default())
}

pub fn check_truncation_bound_with(trials: usize, seed: u64, opts: &TruncationOptions) -> Result<TruncationReport> {
    if trials < 100 {
        return Err(Error::InvalidParam(format!("need at least 100 trials, got {trials}")));
    }
    if !(opts.max_lambda_h > 0.0 && opts.max_lambda_h <= 1.0) {
        return Err(Error::InvalidParam(format!("max_lambda_h must lie in (0, 1], got {}", opts.max_lambda_h)));
    }
    let grid = LatentGrid::default();
    let ctx = StepContext { t: 0.0, x: 0.0, beta: 0.0 };
    let results = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let t = random_trial(&grid, opts, &mut r)?;
            let approx = c_step(&t.q, t.dx, &t.model, ctx, t.h)?;
            let exact = exact_c_oracle(&t.q, t.dx, &t.model, ctx, t.h, 12)?;
            let gaussian = matches!(t.model.marks(), JumpMarkDist::Gaussian { .. });
            Ok((approx.l1_distance(&exact), truncation_bound(t.lambda_max * t.h), t.jumps, gaussian))
        })
        .collect::<Result<Vec<(f64, f64, u64, bool)>>>()?;
    let pairs: Vec<(f64, f64)> = results.iter().map(|r| (r.0, r.1)).collect();
    let audit = audit(&pairs);
    let n = trials as f64;
    Ok(TruncationReport {
        multi_jump_trials: results.iter().filter(|r| r.2 >= 2).count(),
        violations_with_multi_jump: audit.violating_trials.iter().filter(|i| results[**i].2 >= 2).count(),
        violations_with_gaussian_marks: audit.violating_trials.iter().filter(|i| results[**i].3).count(),
        mean_distance: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_bound: pairs.iter().map(|p| p.1).sum::<f64>() / n,
        audit,
    })
}

fn audit(pairs: &[(f64, f64)]) -> BoundReport {
    let mut violating_trials = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for (i, (lhs, rhs)) in pairs.iter().enumerate() {
        if *rhs > 0.0 {
            max_ratio = max_ratio.max(lhs / rhs);
        }
        if *lhs > rhs * (1.0 + 1e-12) + 1e-14 {
            violating_trials.push(i);
        }
    }
    BoundReport {
        trials: pairs.len(),
        violations: violating_trials.len(),
        max_ratio,
        pass: violating_trials.is_empty(),
        violating_trials,
    }
}

/// `(‖norm(b) − norm(a)‖₁, 2‖b − a‖₁ / ‖a‖₁)` for nonnegative nodal vectors.
pub fn norm_stability_sides(a: &[f64], b: &[f64], grid: &LatentGrid) -> Result<(f64, f64)> {
    let na = normalize(&BeliefDensity::from_values(*grid, a.to_vec())?)?;
    let nb = normalize(&BeliefDensity::from_values(*grid, b.to_vec())?)?;
    let d = grid.delta_theta();
    let mass_a = a.iter().sum::<f64>() * d;
    Ok((na.l1_distance(&nb), 2.0 * l1_norm_diff(a, b, d) / mass_a))
}

fn random_pair(grid: &LatentGrid, kind: usize, r: &mut rng::Rng) -> (Vec<f64>, Vec<f64>) {
    let g = grid.len();
    let rand_vec = |r: &mut rng::Rng| -> Vec<f64> { (0..g).map(|_| r.random::<f64>()).collect() };
    match kind {
        // generic pair
        0 => (rand_vec(r), rand_vec(r)),
        // small perturbation
        1 => {
            let a = rand_vec(r);
            let b = a.iter().map(|v| v * (1.0 + 0.01 * (r.random::<f64>() - 0.5))).collect();
            (a, b)
        }
        // disjoint supports
        2 => {
            let cut = r.random_range(1..g);
            let a: Vec<f64> = (0..g).map(|j| if j < cut { r.random::<f64>() } else { 0.0 }).collect();
            let b: Vec<f64> = (0..g).map(|j| if j >= cut { r.random::<f64>() } else { 0.0 }).collect();
            (a, b)
        }
        // near-zero mass on one or both sides
        3 => {
            let sa = 10f64.powf(-r.random_range(100.0..290.0));
            let sb = if r.random_bool(0.5) { sa } else { 1.0 };
            let a = rand_vec(r).into_iter().map(|v| v * sa).collect();
            let b = rand_vec(r).into_iter().map(|v| v * sb).collect();
            (a, b)
        }
        // rescaled copy
        4 => {
            let a = rand_vec(r);
            let c = 10f64.powf(r.random_range(-3.0..3.0));
            let b = a.iter().map(|v| v * c).collect();
            (a, b)
        }
        // sparse spikes
        _ => {
            let mut a = vec![0.0; g];
            let mut b = vec![0.0; g];
            for _ in 0..3 {
                a[r.random_range(0..g)] = r.random::<f64>() + 1e-3;
                b[r.random_range(0..g)] = r.random::<f64>() + 1e-3;
            }
            (a, b)
        }
    }
}

/// Randomized audit of `‖norm(q̃) − norm(q)‖₁ ≤ 2‖q̃ − q‖₁/‖q‖₁`, cycling
/// through generic, perturbed, disjoint, near-zero-mass, rescaled and sparse
/// pairs.
pub fn check_norm_stability(trials: usize, seed: u64) -> Result<BoundReport> {
    if trials == 0 {
        return Err(Error::InvalidParam("need at least one trial".into()));
    }
    let grid = LatentGrid::default();
    let pairs = (0..trials)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let (a, b) = random_pair(&grid, i % 6, &mut r);
            norm_stability_sides(&a, &b, &grid)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(audit(&pairs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityProbe {
    pub trials: usize,
    /// Largest `‖A q₁ − A q₂‖₁ / ‖q₁ − q₂‖₁`.
    pub max_ratio: f64,
    /// Smallest `L ≥ 0` with `ratio ≤ 1 + L Δt` on every trial.
    pub fitted_l: f64,
}

/// L¹ growth of the A-step over random density pairs.
pub fn a_step_stability_probe(lp: &LatentParams, dt: f64, grid: &LatentGrid, trials: usize, seed: u64) -> Result<StabilityProbe> {
    if trials == 0 {
        return Err(Error::InvalidParam("need at least one trial".into()));
    }
    let k = build_kernel(lp, dt, grid)?;
    let r0 = crate::filter::ResidualCorrection::disabled(grid);
    let mut max_ratio: f64 = 0.0;
    for i in 0..trials {
        let mut r = rng::stream(seed, i as u64);
        let (a, b) = random_pair(grid, i % 6, &mut r);
        let na = normalize(&BeliefDensity::from_values(*grid, a)?)?;
        let nb = normalize(&BeliefDensity::from_values(*grid, b)?)?;
        let before = na.l1_distance(&nb);
        // rescaled copies differ only by rounding
        if before < 1e-9 {
            continue;
        }
        let after = crate::filter::a_step(&na, &k, &r0)?.l1_distance(&crate::filter::a_step(&nb, &k, &r0)?);
        max_ratio = max_ratio.max(after / before);
    }
    Ok(StabilityProbe { trials, max_ratio, fitted_l: ((max_ratio - 1.0) / dt).max(0.0) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub convergence: ConvergenceConfig,
    pub convergence_seed: u64,
    pub truncation_trials: usize,
    pub norm_trials: usize,
    pub pf_particles: usize,
    pub pf_seeds: usize,
    pub pf_steps: usize,
    pub pf_burn_in: usize,
    pub kalman_prior_sd: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            convergence: ConvergenceConfig::default(),
            convergence_seed: 42,
            truncation_trials: 500,
            norm_trials: 1000,
            pf_particles: 100_000,
            pf_seeds: 10,
            pf_steps: 300,
            pf_burn_in: 20,
            kalman_prior_sd: 0.3,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeCheck {
    pub report: ConvergenceReport,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub convergence: SlopeCheck,
    pub truncation_bound: TruncationReport,
    pub norm_stability: BoundReport,
    pub a_step_stability: StabilityProbe,
    pub pf_agreement: PfAgreementReport,
    pub kalman: KalmanAgreementReport,
    pub pass: bool,
}

impl VerifyReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// The whole oracle suite on one model.
pub fn run_verify(lp: &LatentParams, op: &ObsParams, grid: &LatentGrid, dt: f64, cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.pf_seeds < 2 {
        return Err(Error::InvalidParam("pf_seeds must be at least 2".into()));
    }
    let conv = convergence_study_simulated(lp, op, &cfg.convergence, cfg.convergence_seed)?;
    let slope = conv.fitted_slope;
    let convergence = SlopeCheck { report: conv, lower: 0.7, upper: 1.3, pass: (0.7..=1.3).contains(&slope) };
    let truncation_bound = check_truncation_bound(cfg.truncation_trials, cfg.seed)?;
    let norm_stability = check_norm_stability(cfg.norm_trials, cfg.seed)?;
    let a_step_stability = a_step_stability_probe(lp, dt, grid, cfg.norm_trials, cfg.seed)?;
    let seeds: Vec<u64> = (0..cfg.pf_seeds as u64).map(|i| cfg.seed + i).collect();
    let pf_agreement = pf_agreement(lp, op, grid, dt, cfg.pf_steps, cfg.pf_burn_in, &seeds, cfg.pf_particles)?;
    let kalman = kalman_agreement(lp, op, grid, dt, cfg.pf_steps, cfg.kalman_prior_sd, &seeds, cfg.pf_particles)?;
    let pass = convergence.pass && truncation_bound.audit.pass && norm_stability.pass && pf_agreement.pass && kalman.pass;
    Ok(VerifyReport { convergence, truncation_bound, norm_stability, a_step_stability, pf_agreement, kalman, pass })
}
