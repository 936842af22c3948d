//! Monte Carlo rollouts of the one-step jump-diffusion law driven by the
//! A-step-propagated belief.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::decoder::ObservationModel;
use crate::error::{Error, Result};
use crate::filter::{a_step, FilterState, ResidualCorrection, TransitionKernel, ZakaiFilter};
use crate::grid::{posterior_mean, BeliefDensity};
use crate::metrics::quantile_sorted;
use crate::rng;
use crate::train::BeliefMode;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    /// `S × N`; entry `[m][n]` is trajectory `m` after `n + 1` steps.
    pub trajectories: Vec<Vec<f64>>,
    pub horizon: usize,
    pub seed: u64,
    pub origin_x: f64,
}

impl ForecastEnsemble {
    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    /// Values of every trajectory at step `n`.
    pub fn column(&self, n: usize) -> Vec<f64> {
        self.trajectories.iter().map(|t| t[n]).collect()
    }

    pub fn mean_path(&self) -> Vec<f64> {
        let s = self.size() as f64;
        (0..self.horizon).map(|n| self.trajectories.iter().map(|t| t[n]).sum::<f64>() / s).collect()
    }

    /// One row per `(trajectory, step)`: `trajectory,step,x`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "trajectory,step,x")?;
            for (m, traj) in self.trajectories.iter().enumerate() {
                for (n, x) in traj.iter().enumerate() {
                    writeln!(out, "{m},{},{x}", n + 1)?;
                }
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Beliefs `π_M, Aπ_M, A²π_M, …` of length `n`.
pub fn belief_sequence(start: &BeliefDensity, k: &TransitionKernel, r: &ResidualCorrection, n: usize) -> Result<Vec<BeliefDensity>> {
    let mut seq = Vec::with_capacity(n);
    let mut cur = if start.is_normalized() { start.clone() } else { start.normalize()? };
    for i in 0..n {
        if i > 0 {
            cur = a_step(&cur, k, r)?;
        }
        seq.push(cur.clone());
    }
    Ok(seq)
}

/// Roll out `s` trajectories of `n` steps from `state`, advancing the belief by
/// the A-step only.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    state: &FilterState,
    model: &ObservationModel,
    k: &TransitionKernel,
    n: usize,
    s: usize,
    dt: f64,
    seed: u64,
) -> Result<ForecastEnsemble> {
    if n == 0 || s == 0 {
        return Err(Error::InvalidParam("horizon and ensemble size must be >= 1".into()));
    }
    let beliefs = belief_sequence(&state.q, k, &ResidualCorrection::disabled(k.grid()), n)?;
    rollout_with_beliefs(&beliefs, model, state.t, state.last_x, s, dt, seed)
}

/// Rollout against an explicit belief per horizon step.
pub fn rollout_with_beliefs(
    beliefs: &[BeliefDensity],
    model: &ObservationModel,
    t0: f64,
    x0: f64,
    s: usize,
    dt: f64,
    seed: u64,
) -> Result<ForecastEnsemble> {
    let n = beliefs.len();
    if n == 0 || s == 0 {
        return Err(Error::InvalidParam("horizon and ensemble size must be >= 1".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParam(format!("dt must be positive, got {dt}")));
    }
    let grid = *beliefs[0].grid();
    let nodes: Vec<f64> = grid.nodes().collect();
    // cumulative node probabilities and belief features per step, shared by all trajectories
    let mut cdfs = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for b in beliefs {
        let mut acc = 0.0;
        let cdf: Vec<f64> = b.probabilities().into_iter().map(|p| { acc += p; acc }).collect();
        cdfs.push(cdf);
        betas.push(posterior_mean(b)?);
    }
    let sqrt_dt = dt.sqrt();
    let marks = model.marks();
    let trajectories: Vec<Vec<f64>> = (0..s)
        .into_par_iter()
        .map(|m| {
            let mut r = rng::stream(seed, m as u64);
            let mut x = x0;
            let mut out = Vec::with_capacity(n);
            for step in 0..n {
                let cdf = &cdfs[step];
                let u: f64 = r.random::<f64>() * cdf[cdf.len() - 1];
                let j = cdf.partition_point(|c| *c <= u).min(nodes.len() - 1);
                let t = t0 + step as f64 * dt;
                let c = model.coeffs(t, x, betas[step], nodes[j]);
                let xi: f64 = r.sample(StandardNormal);
                let rate = c.lambda * dt;
                let mut jump = 0.0;
                if rate > 0.0 {
                    let count = Poisson::new(rate).map(|p| p.sample(&mut r) as u64).unwrap_or(0);
                    for _ in 0..count {
                        jump += marks.sample(&mut r);
                    }
                }
                x += c.mu * dt + c.sigma * sqrt_dt * xi + jump;
                out.push(x);
            }
            out
        })
        .collect();
    if trajectories.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forecast trajectory".into()));
    }
    Ok(ForecastEnsemble { trajectories, horizon: n, seed, origin_x: x0 })
}

/// Filter each context from the uniform belief, then roll out `s` trajectories
/// of `n` steps. Window `i` draws from seed `seed + i`. With
/// [`BeliefMode::FrozenUniform`] the filter is skipped and every horizon step
/// sees the uniform belief.
pub fn forecast_contexts(
    filter: &ZakaiFilter,
    contexts: &[Vec<f64>],
    n: usize,
    s: usize,
    belief: BeliefMode,
    seed: u64,
) -> Result<Vec<ForecastEnsemble>> {
    let grid = *filter.grid();
    let dt = filter.dt();
    contexts
        .par_iter()
        .enumerate()
        .map(|(i, ctx)| {
            if ctx.len() < 2 {
                return Err(Error::WindowTooShort { len: ctx.len(), need: 2 });
            }
            let wseed = seed.wrapping_add(i as u64);
            match belief {
                BeliefMode::Filtered => {
                    let (state, _) = filter.filter_window(ctx, &BeliefDensity::uniform(grid))?;
                    rollout(&state, filter.model(), filter.kernel(), n, s, dt, wseed)
                }
                BeliefMode::FrozenUniform => {
                    let beliefs = vec![BeliefDensity::uniform(grid); n];
                    let t0 = (ctx.len() - 1) as f64 * dt;
                    rollout_with_beliefs(&beliefs, filter.model(), t0, ctx[ctx.len() - 1], s, dt, wseed)
                }
            }
        })
        .collect()
}

/// Per-step quantiles, `N × levels`.
pub fn ensemble_quantiles(ens: &ForecastEnsemble, levels: &[f64]) -> Result<Vec<Vec<f64>>> {
    if let Some(bad) = levels.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidParam(format!("quantile level {bad} outside (0, 1)")));
    }
    if ens.trajectories.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    Ok((0..ens.horizon)
        .map(|n| {
            let mut col = ens.column(n);
            col.sort_by(f64::total_cmp);
            levels.iter().map(|p| quantile_sorted(&col, *p)).collect()
        })
        .collect())
}

/// Columns `step,q<level>...`.
pub fn write_quantiles_csv(path: impl AsRef<Path>, levels: &[f64], quantiles: &[Vec<f64>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    header.extend(levels.iter().map(|p| format!("q{p}")));
    w.write_record(&header)?;
    for (n, row) in quantiles.iter().enumerate() {
        let mut rec = vec![(n + 1).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
