//! Grid filter: latent transition kernel, likelihood reweightings and the
//! palindromic split update.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{LocalCoeffs, ObservationModel};
use crate::error::{Error, Result};
use crate::grid::{posterior_mean, posterior_mode, BeliefDensity, LatentGrid, MASS_FLOOR};
use crate::sim::LatentParams;

/// Kernel entries below `exp(-KERNEL_LOG_CUTOFF)` times the row peak are dropped.
pub const KERNEL_LOG_CUTOFF: f64 = 40.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub(crate) fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var)
}

#[inline]
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone, PartialEq)]
struct KernelRow {
    start: usize,
    vals: Vec<f64>,
}

/// Row-stochastic latent transition density, stored as one contiguous band per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    grid: LatentGrid,
    dt: f64,
    rows: Vec<KernelRow>,
}

pub fn build_kernel(lp: &LatentParams, dt: f64, grid: &LatentGrid) -> Result<TransitionKernel> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParam(format!("dt must be positive, got {dt}")));
    }
    lp.validate()?;
    let g = grid.len();
    let d = grid.delta_theta();
    let var = lp.sigma_theta * lp.sigma_theta * dt;
    let mut rows = Vec::with_capacity(g);
    for i in 0..g {
        let th = grid.node(i);
        let mean = th + lp.kappa * (lp.theta_bar - th) * dt;
        let center = grid.nearest(mean);
        if var == 0.0 {
            rows.push(KernelRow { start: center, vals: vec![1.0 / d] });
            continue;
        }
        let reach = ((2.0 * KERNEL_LOG_CUTOFF * var).sqrt() / d).ceil() as usize + 1;
        let lo = center.saturating_sub(reach);
        let hi = (center + reach).min(g - 1);
        let logs: Vec<f64> = (lo..=hi)
            .map(|j| {
                let z = grid.node(j) - mean;
                -z * z / (2.0 * var)
            })
            .collect();
        let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = logs.iter().position(|l| l - peak >= -KERNEL_LOG_CUTOFF).unwrap_or(0);
        let last = logs.iter().rposition(|l| l - peak >= -KERNEL_LOG_CUTOFF).unwrap_or(0);
        let mut vals: Vec<f64> = logs[first..=last].iter().map(|l| (l - peak).exp()).collect();
        let s: f64 = vals.iter().sum::<f64>() * d;
        vals.iter_mut().for_each(|v| *v /= s);
        rows.push(KernelRow { start: lo + first, vals });
    }
    Ok(TransitionKernel { grid: *grid, dt, rows })
}

impl TransitionKernel {
    pub fn grid(&self) -> &LatentGrid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `K(θ_j | θ_i)`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let r = &self.rows[i];
        if j < r.start || j >= r.start + r.vals.len() {
            0.0
        } else {
            r.vals[j - r.start]
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let g = self.grid.len();
        (0..g).map(|i| (0..g).map(|j| self.entry(i, j)).collect()).collect()
    }

    /// `Σ_j K[i][j] Δθ`.
    pub fn row_mass(&self, i: usize) -> f64 {
        self.rows[i].vals.iter().sum::<f64>() * self.grid.delta_theta()
    }

    /// Widest stored row.
    pub fn bandwidth(&self) -> usize {
        self.rows.iter().map(|r| r.vals.len()).max().unwrap_or(0)
    }

    /// `out_j = Σ_i K[i][j] q_i Δθ`, no clipping or normalization.
    pub fn propagate(&self, q: &[f64]) -> Vec<f64> {
        let d = self.grid.delta_theta();
        let mut out = vec![0.0; q.len()];
        for (qi, row) in q.iter().zip(&self.rows) {
            if *qi == 0.0 {
                continue;
            }
            let w = qi * d;
            for (o, k) in out[row.start..row.start + row.vals.len()].iter_mut().zip(&row.vals) {
                *o += w * k;
            }
        }
        out
    }

    /// [`TransitionKernel::propagate`] applied to each of `P` tangent directions.
    pub(crate) fn propagate_tangent<const P: usize>(&self, dq: &[[f64; P]]) -> Vec<[f64; P]> {
        let d = self.grid.delta_theta();
        let mut out = vec![[0.0; P]; dq.len()];
        for (dqi, row) in dq.iter().zip(&self.rows) {
            if dqi.iter().all(|v| *v == 0.0) {
                continue;
            }
            for (o, k) in out[row.start..row.start + row.vals.len()].iter_mut().zip(&row.vals) {
                let w = k * d;
                for p in 0..P {
                    o[p] += w * dqi[p];
                }
            }
        }
        out
    }
}

/// Additive zero-mass correction applied after kernel propagation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCorrection {
    values: Vec<f64>,
    enabled: bool,
}

impl ResidualCorrection {
    pub fn disabled(grid: &LatentGrid) -> Self {
        Self { values: vec![0.0; grid.len()], enabled: false }
    }

    /// Enabled correction; `values` are projected to zero total mass.
    pub fn new(values: Vec<f64>, grid: &LatentGrid) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch { left: values.len(), right: grid.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual correction".into()));
        }
        let mut r = Self { values, enabled: true };
        r.project();
        Ok(r)
    }

    /// Re-impose zero total mass, e.g. after a parameter update.
    pub fn project(&mut self) {
        let mean = self.values.iter().sum::<f64>() / self.values.len() as f64;
        self.values.iter_mut().for_each(|v| *v -= mean);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn mass(&self, grid: &LatentGrid) -> f64 {
        self.values.iter().sum::<f64>() * grid.delta_theta()
    }
}

fn check_normalized(q: &BeliefDensity) -> Result<()> {
    if q.is_normalized() {
        Ok(())
    } else {
        Err(Error::NotNormalized)
    }
}

fn normalized_from(values: Vec<f64>, grid: &LatentGrid) -> Result<BeliefDensity> {
    let d = grid.delta_theta();
    let mass = values.iter().sum::<f64>() * d;
    if !(mass > MASS_FLOOR) || !mass.is_finite() {
        return Err(Error::ZeroMass { mass });
    }
    Ok(BeliefDensity::from_normalized_unchecked(*grid, values.into_iter().map(|v| v / mass).collect()))
}

/// Propagate through the kernel, add the residual, clip at zero and normalize.
pub fn a_step(q: &BeliefDensity, k: &TransitionKernel, r: &ResidualCorrection) -> Result<BeliefDensity> {
    check_normalized(q)?;
    if q.grid() != k.grid() {
        return Err(Error::InvalidParam("density and kernel live on different grids".into()));
    }
    let mut out = k.propagate(q.values());
    if r.enabled {
        for (o, v) in out.iter_mut().zip(&r.values) {
            *o = (*o + v).max(0.0);
        }
    }
    normalized_from(out, q.grid())
}

/// Multiply by `exp(logl)` node-wise and normalize; the shift by the largest
/// log-likelihood on the support keeps the exponentials in range.
pub fn reweight_log(q: &[f64], logl: &[f64], grid: &LatentGrid) -> Result<BeliefDensity> {
    let peak = q
        .iter()
        .zip(logl)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if peak.is_nan() || peak == f64::NEG_INFINITY || peak == f64::INFINITY {
        return Err(Error::ZeroMass { mass: 0.0 });
    }
    let out: Vec<f64> = q
        .iter()
        .zip(logl)
        .map(|(v, l)| if *v > 0.0 { v * (l - peak).exp() } else { 0.0 })
        .collect();
    normalized_from(out, grid)
}

/// `ln N(dx; μh, σ²h)`.
#[inline]
pub fn log_b_likelihood(c: LocalCoeffs, dx: f64, h: f64) -> f64 {
    log_normal_pdf(dx, c.mu * h, c.sigma * c.sigma * h)
}

/// `ln[e^{-λh} N(dx; μh, σ²h) + λh e^{-λh} Σ_m w_m N(dx; μh + z_m, σ²h)]`.
pub fn log_c_likelihood(c: LocalCoeffs, quad: &[(f64, f64)], dx: f64, h: f64) -> f64 {
    let var = c.sigma * c.sigma * h;
    let base = log_normal_pdf(dx, c.mu * h, var);
    let lh = c.lambda * h;
    if lh <= 0.0 {
        return base;
    }
    let jump = quad
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(z, w)| w.ln() + log_normal_pdf(dx, c.mu * h + z, var))
        .fold(f64::NEG_INFINITY, log_add_exp);
    -lh + log_add_exp(base, lh.ln() + jump)
}

/// Full-step at-most-one-jump log density:
/// `ln p(dx | θ) = -λΔt + ln[N(dx; μΔt, σ²Δt) + λΔt Σ_m w_m N(dx; μΔt + z_m, σ²Δt)]`.
pub fn log_step_density(c: LocalCoeffs, quad: &[(f64, f64)], dx: f64, dt: f64) -> f64 {
    log_c_likelihood(c, quad, dx, dt)
}

/// Per-node context passed to the decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub t: f64,
    pub x: f64,
    pub beta: f64,
}

/// Gaussian reweighting over a half-step `h`.
pub fn b_step(q: &BeliefDensity, dx: f64, model: &ObservationModel, ctx: StepContext, h: f64) -> Result<BeliefDensity> {
    check_normalized(q)?;
    check_h(h)?;
    let logl: Vec<f64> = q
        .grid()
        .nodes()
        .map(|th| log_b_likelihood(model.coeffs(ctx.t, ctx.x, ctx.beta, th), dx, h))
        .collect();
    reweight_log(q.values(), &logl, q.grid())
}

/// At-most-one-jump mixture reweighting over a half-step `h`.
pub fn c_step(q: &BeliefDensity, dx: f64, model: &ObservationModel, ctx: StepContext, h: f64) -> Result<BeliefDensity> {
    check_normalized(q)?;
    check_h(h)?;
    let quad = model.mark_quadrature();
    let logl: Vec<f64> = q
        .grid()
        .nodes()
        .map(|th| log_c_likelihood(model.coeffs(ctx.t, ctx.x, ctx.beta, th), quad, dx, h))
        .collect();
    reweight_log(q.values(), &logl, q.grid())
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("step must be positive, got {h}")))
    }
}

/// Jump-count likelihood summed over `0..=kmax` jumps with (untruncated) Poisson
/// weights and exact n-fold mark laws. Test oracle for [`c_step`].
pub fn exact_c_oracle(
    q: &BeliefDensity,
    dx: f64,
    model: &ObservationModel,
    ctx: StepContext,
    h: f64,
    kmax: usize,
) -> Result<BeliefDensity> {
    check_normalized(q)?;
    check_h(h)?;
    if kmax == 0 {
        return Err(Error::InvalidParam("kmax must be at least 1".into()));
    }
    let folds: Vec<Vec<(f64, f64, f64)>> = (0..=kmax).map(|n| model.marks().n_fold(n)).collect();
    let logl: Vec<f64> = q
        .grid()
        .nodes()
        .map(|th| {
            let c = model.coeffs(ctx.t, ctx.x, ctx.beta, th);
            let lh = c.lambda * h;
            let var = c.sigma * c.sigma * h;
            let mut acc = f64::NEG_INFINITY;
            let mut log_pois = -lh; // ln P(N = 0)
            for (n, fold) in folds.iter().enumerate() {
                if n > 0 {
                    if lh <= 0.0 {
                        break;
                    }
                    log_pois += lh.ln() - (n as f64).ln();
                }
                for (shift, extra, w) in fold {
                    if *w > 0.0 {
                        acc = log_add_exp(acc, log_pois + w.ln() + log_normal_pdf(dx, c.mu * h + shift, var + extra));
                    }
                }
            }
            acc
        })
        .collect();
    reweight_log(q.values(), &logl, q.grid())
}

/// How one observation increment is shared between the two likelihood halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Each half carries the square root of the full-step likelihood, so the
    /// palindrome applies `p(dx | θ)` exactly once.
    #[default]
    Geometric,
    /// Each half evaluates the half-step likelihoods at the full increment;
    /// `dx` enters twice per update.
    HalfStep,
}

/// Belief carried between updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub q: BeliefDensity,
    pub beta: f64,
    pub k: usize,
    pub t: f64,
    pub last_x: f64,
}

impl FilterState {
    pub fn new(q: BeliefDensity, t: f64, x: f64) -> Result<Self> {
        let q = if q.is_normalized() { q } else { q.normalize()? };
        let beta = posterior_mean(&q)?;
        Ok(Self { q, beta, k: 0, t, last_x: x })
    }
}

/// Kernel, observation model and split configuration.
#[derive(Debug, Clone)]
pub struct ZakaiFilter {
    kernel: TransitionKernel,
    model: ObservationModel,
    residual: ResidualCorrection,
    mode: SplitMode,
}

impl ZakaiFilter {
    pub fn new(kernel: TransitionKernel, model: ObservationModel) -> Self {
        let residual = ResidualCorrection::disabled(kernel.grid());
        Self { kernel, model, residual, mode: SplitMode::default() }
    }

    pub fn with_mode(mut self, mode: SplitMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_residual(mut self, residual: ResidualCorrection) -> Result<Self> {
        if residual.values.len() != self.kernel.grid().len() {
            return Err(Error::LengthMismatch { left: residual.values.len(), right: self.kernel.grid().len() });
        }
        self.residual = residual;
        Ok(self)
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn model(&self) -> &ObservationModel {
        &self.model
    }

    pub fn residual(&self) -> &ResidualCorrection {
        &self.residual
    }

    pub fn mode(&self) -> SplitMode {
        self.mode
    }

    pub fn grid(&self) -> &LatentGrid {
        self.kernel.grid()
    }

    pub fn dt(&self) -> f64 {
        self.kernel.dt()
    }

    /// Log of the combined `C_h B_h` factor applied on each side of the A-step.
    pub fn log_half_factors(&self, dx: f64, ctx: StepContext) -> Vec<f64> {
        let dt = self.dt();
        let h = 0.5 * dt;
        let quad = self.model.mark_quadrature();
        self.grid()
            .nodes()
            .map(|th| {
                let c = self.model.coeffs(ctx.t, ctx.x, ctx.beta, th);
                match self.mode {
                    SplitMode::Geometric => 0.5 * log_step_density(c, quad, dx, dt),
                    SplitMode::HalfStep => log_b_likelihood(c, dx, h) + log_c_likelihood(c, quad, dx, h),
                }
            })
            .collect()
    }

    /// `C_h ∘ B_h ∘ A_Δt ∘ B_h ∘ C_h`, sharing `dx` between both halves.
    pub fn strang_update(&self, state: &FilterState, dx: f64) -> Result<FilterState> {
        check_normalized(&state.q)?;
        let ctx = StepContext { t: state.t, x: state.last_x, beta: state.beta };
        let logl = self.log_half_factors(dx, ctx);
        let grid = self.grid();
        let pre = reweight_log(state.q.values(), &logl, grid)?;
        let mid = a_step(&pre, &self.kernel, &self.residual)?;
        let q = reweight_log(mid.values(), &logl, grid)?;
        let beta = posterior_mean(&q)?;
        Ok(FilterState { q, beta, k: state.k + 1, t: state.t + self.dt(), last_x: state.last_x + dx })
    }

    /// Run the update over every increment of `context`. Returns the final state
    /// and the belief feature before the first and after every update.
    pub fn filter_window(&self, context: &[f64], init: &BeliefDensity) -> Result<(FilterState, Vec<f64>)> {
        let (state, trace) = self.run(context, init, None)?;
        Ok((state, trace.rows.iter().map(|r| r.beta).collect()))
    }

    /// Like [`ZakaiFilter::filter_window`] but also records modes and optional
    /// density snapshots every `snapshot_every` steps.
    pub fn filter_window_trace(&self, context: &[f64], init: &BeliefDensity, snapshot_every: Option<usize>) -> Result<(FilterState, FilterTrace)> {
        self.run(context, init, snapshot_every)
    }

    fn run(&self, context: &[f64], init: &BeliefDensity, snapshot_every: Option<usize>) -> Result<(FilterState, FilterTrace)> {
        if context.len() < 2 {
            return Err(Error::WindowTooShort { len: context.len(), need: 2 });
        }
        if init.grid() != self.grid() {
            return Err(Error::InvalidParam("initial density lives on a different grid".into()));
        }
        let mut state = FilterState::new(init.clone(), 0.0, context[0])?;
        let mut trace = FilterTrace { grid: *self.grid(), rows: Vec::with_capacity(context.len()), snapshots: Vec::new() };
        trace.record(&state, snapshot_every)?;
        for w in context.windows(2) {
            state = self.strang_update(&state, w[1] - w[0])?;
            trace.record(&state, snapshot_every)?;
        }
        Ok((state, trace))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub beta: f64,
    pub post_mean: f64,
    pub post_mode: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub grid: LatentGrid,
    pub rows: Vec<TraceRow>,
    /// `(k, density values)`.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl FilterTrace {
    fn record(&mut self, s: &FilterState, every: Option<usize>) -> Result<()> {
        let mode = posterior_mode(&s.q)?;
        self.rows.push(TraceRow { k: s.k, beta: s.beta, post_mean: posterior_mean(&s.q)?, post_mode: mode });
        if let Some(n) = every.filter(|n| *n > 0) {
            if s.k % n == 0 {
                self.snapshots.push((s.k, s.q.values().to_vec()));
            }
        }
        Ok(())
    }

    /// Columns `k,beta,post_mean,post_mode`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }

    /// Long format `k,theta,value`.
    pub fn write_snapshots_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "k,theta,value")?;
            for (k, vals) in &self.snapshots {
                for (th, v) in self.grid.nodes().zip(vals) {
                    writeln!(out, "{k},{th},{v}")?;
                }
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}
