//! Decoder fitting by gradient ascent on the stepwise filtering-and-forecasting
//! objective.
//!
//! For a window `x_0..x_{M+N}` with increments `dx_k` the objective is
//! `Σ_{k<M+N} E_{π_k}[ln p(dx_k | θ)] − kl_weight Σ_{k<M} KL(π_k ‖ A π_{k−1})`.
//! On the context `π_k` is the split-filter belief after absorbing `dx_k`
//! (`π_{−1}` uniform), so each context term is a one-step evidence bound.
//! On the target segment `π_k = A π_{k−1}` and no increment is absorbed.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, LinearDecoderParams, ObservationModel};
use crate::error::{Error, Result};
use crate::filter::{log_add_exp, log_b_likelihood, log_c_likelihood, log_normal_pdf, log_step_density, SplitMode, TransitionKernel};
use crate::grid::{BeliefDensity, MASS_FLOOR};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Analytic,
    FiniteDifference,
}

/// Where the decoder's belief comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeliefMode {
    #[default]
    Filtered,
    /// Belief held at the uniform density; the decoder-only ablation.
    FrozenUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub grad_mode: GradMode,
    pub fd_eps: f64,
    pub clip_norm: f64,
    pub kl_weight: f64,
    pub warmup_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay on the raw coordinates.
    pub weight_decay: f64,
    pub seed: u64,
    /// Raw coordinate names held fixed during fitting.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            epochs: 50,
            batch: 32,
            grad_mode: GradMode::FiniteDifference,
            fd_eps: 1e-5,
            clip_norm: 1.0,
            kl_weight: 1.0,
            warmup_epochs: 3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 42,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParam(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if !(self.fd_eps > 0.0) {
            return Err(Error::InvalidParam(format!("fd_eps must be positive, got {}", self.fd_eps)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidParam("batch must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidParam(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::InvalidParam(format!("kl_weight must be nonnegative, got {}", self.kl_weight)));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch: linear warm-up, then cosine decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = self.epochs.saturating_sub(self.warmup_epochs).max(1) as f64;
        let progress = (epoch - self.warmup_epochs) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Fixed ingredients of the objective.
#[derive(Debug, Clone)]
pub struct ObjectiveSetup {
    pub kernel: TransitionKernel,
    pub m: usize,
    pub n: usize,
    pub kl_weight: f64,
    pub mode: SplitMode,
    pub belief: BeliefMode,
    /// Small-jump truncation threshold passed to the observation model.
    pub epsilon: Option<f64>,
}

impl ObjectiveSetup {
    pub fn new(kernel: TransitionKernel, m: usize, n: usize) -> Self {
        Self { kernel, m, n, kl_weight: 1.0, mode: SplitMode::default(), belief: BeliefMode::default(), epsilon: None }
    }

    pub fn dt(&self) -> f64 {
        self.kernel.dt()
    }

    fn steps(&self) -> usize {
        self.m + self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowObjective {
    pub loglik: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub loglik_term: f64,
    pub kl_term: f64,
    pub total: f64,
    pub per_window: Vec<WindowObjective>,
}

/// `Σ_j π_j ln(π_j / ρ_j) Δθ`. Prior values are floored at [`MASS_FLOOR`];
/// an exactly vanishing prior under posterior mass is a support mismatch.
pub fn kl_discrete(pi: &BeliefDensity, prior: &BeliefDensity) -> Result<f64> {
    if !pi.is_normalized() || !prior.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if pi.grid() != prior.grid() {
        return Err(Error::InvalidParam("densities live on different grids".into()));
    }
    if let Some(j) = pi.values().iter().zip(prior.values()).position(|(p, r)| *p > MASS_FLOOR && *r == 0.0) {
        return Err(Error::SupportMismatch { node: j });
    }
    Ok(kl_values(pi.values(), prior.values(), pi.grid().delta_theta()))
}

fn kl_values(pi: &[f64], prior: &[f64], d: f64) -> f64 {
    let acc: f64 = pi
        .iter()
        .zip(prior)
        .filter(|(p, _)| **p > MASS_FLOOR)
        .map(|(p, r)| p * (p / r.max(MASS_FLOOR)).ln())
        .sum();
    (acc * d).max(0.0)
}

fn check_window(setup: &ObjectiveSetup, window: &[f64]) -> Result<()> {
    let need = setup.steps() + 1;
    if window.len() < need {
        return Err(Error::WindowTooShort { len: window.len(), need });
    }
    if window.iter().take(need).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("window observation".into()));
    }
    Ok(())
}

fn normalize_in_place(v: &mut [f64], d: f64) -> Result<()> {
    let mass = v.iter().sum::<f64>() * d;
    if !(mass > MASS_FLOOR) || !mass.is_finite() {
        return Err(Error::ZeroMass { mass });
    }
    v.iter_mut().for_each(|x| *x /= mass);
    Ok(())
}

fn reweight_in_place(q: &mut [f64], logl: &[f64], d: f64) -> Result<()> {
    let peak = q.iter().zip(logl).filter(|(v, _)| **v > 0.0).map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::ZeroMass { mass: 0.0 });
    }
    for (v, l) in q.iter_mut().zip(logl) {
        if *v > 0.0 {
            *v *= (l - peak).exp();
        }
    }
    normalize_in_place(q, d)
}

/// Objective of one window (no gradient).
pub fn window_objective(decoder: &Decoder, setup: &ObjectiveSetup, window: &[f64]) -> Result<WindowObjective> {
    check_window(setup, window)?;
    let model = ObservationModel::new(decoder.clone(), setup.epsilon)?;
    let kernel = &setup.kernel;
    let grid = kernel.grid();
    let d = grid.delta_theta();
    let dt = setup.dt();
    let h = 0.5 * dt;
    let nodes: Vec<f64> = grid.nodes().collect();
    let quad = model.mark_quadrature();

    let filtered = setup.belief == BeliefMode::Filtered;
    let mut pi = BeliefDensity::uniform(*grid).into_values();
    let (mut ll, mut kl) = (0.0, 0.0);
    let mut g = vec![0.0; nodes.len()];
    for k in 0..setup.steps() {
        let dx = window[k + 1] - window[k];
        let (t, x) = (k as f64 * dt, window[k]);
        let beta: f64 = nodes.iter().zip(&pi).map(|(th, p)| th * p).sum::<f64>() * d;
        for (gj, th) in g.iter_mut().zip(&nodes) {
            *gj = log_step_density(model.coeffs(t, x, beta, *th), quad, dx, dt);
        }
        if filtered && k < setup.m {
            let mut prior = kernel.propagate(&pi);
            normalize_in_place(&mut prior, d)?;
            let half: Vec<f64> = match setup.mode {
                SplitMode::Geometric => g.iter().map(|v| 0.5 * v).collect(),
                SplitMode::HalfStep => nodes
                    .iter()
                    .map(|th| {
                        let c = model.coeffs(t, x, beta, *th);
                        log_b_likelihood(c, dx, h) + log_c_likelihood(c, quad, dx, h)
                    })
                    .collect(),
            };
            reweight_in_place(&mut pi, &half, d)?;
            pi = kernel.propagate(&pi);
            reweight_in_place(&mut pi, &half, d)?;
            kl += kl_values(&pi, &prior, d);
        } else if filtered {
            pi = kernel.propagate(&pi);
            normalize_in_place(&mut pi, d)?;
        }
        ll += pi.iter().zip(&g).filter(|(p, _)| **p > 0.0).map(|(p, gj)| p * gj).sum::<f64>() * d;
    }
    if !(ll.is_finite() && kl.is_finite()) {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok(WindowObjective { loglik: ll, kl })
}

pub fn stepwise_objective(decoder: &Decoder, setup: &ObjectiveSetup, windows: &[&[f64]]) -> Result<ObjectiveReport> {
    let per_window = windows
        .par_iter()
        .map(|w| window_objective(decoder, setup, w))
        .collect::<Result<Vec<_>>>()?;
    let loglik_term: f64 = per_window.iter().map(|w| w.loglik).sum();
    let kl_term: f64 = per_window.iter().map(|w| w.kl).sum();
    Ok(ObjectiveReport { loglik_term, kl_term, total: loglik_term - setup.kl_weight * kl_term, per_window })
}

/// Mean over windows of the objective per step; the quantity ascended by [`fit`].
pub fn mean_objective(decoder: &Decoder, setup: &ObjectiveSetup, windows: &[&[f64]]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::EmptySeries);
    }
    let r = stepwise_objective(decoder, setup, windows)?;
    Ok(r.total / (windows.len() * setup.steps()) as f64)
}

// ---------------------------------------------------------------------------
// Forward-mode derivatives for the linear decoder in raw coordinates
// (a1, ln σ_x, b1, c_x).

const NP: usize = 4;
type Tan = [f64; NP];

fn scale(t: &Tan, s: f64) -> Tan {
    [t[0] * s, t[1] * s, t[2] * s, t[3] * s]
}

fn axpy(acc: &mut Tan, s: f64, t: &Tan) {
    for p in 0..NP {
        acc[p] += s * t[p];
    }
}

/// `ln N(dx; a θ τ + shift, σ² τ)` and its derivative in `(a1, ln σ, shift)`.
fn lin_gauss(p: &LinearDecoderParams, th: f64, dx: f64, tau: f64, shift: f64) -> (f64, f64, f64, f64) {
    let var = p.sigma_x * p.sigma_x * tau;
    let r = dx - p.a1 * th * tau - shift;
    let val = log_normal_pdf(dx, p.a1 * th * tau + shift, var);
    (val, r * th * tau / var, -1.0 + r * r / var, r / var)
}

/// `ln[e^{-λτ}(N0 + λτ N1)]` with its raw-coordinate gradient.
fn lin_mix(p: &LinearDecoderParams, th: f64, dx: f64, tau: f64) -> (f64, Tan) {
    let (l0, l0_a, l0_s, _) = lin_gauss(p, th, dx, tau, 0.0);
    let lambda = (p.b1 * th).max(0.0);
    let dlam_db = if p.b1 * th > 0.0 { th } else { 0.0 };
    let lt = lambda * tau;
    if lt <= 0.0 {
        // only the intensity direction can move off the boundary
        let mut grad = [l0_a, l0_s, 0.0, 0.0];
        if dlam_db != 0.0 {
            let (l1, ..) = lin_gauss(p, th, dx, tau, p.c_x);
            grad[2] = (-tau + tau * (l1 - l0).exp()) * dlam_db;
        }
        return (l0, grad);
    }
    let (l1, l1_a, l1_s, l1_c) = lin_gauss(p, th, dx, tau, p.c_x);
    let log_d = log_add_exp(l0, lt.ln() + l1);
    let w0 = (l0 - log_d).exp();
    let w1 = (lt.ln() + l1 - log_d).exp();
    let ratio = (l1 - log_d).exp();
    let grad = [
        w0 * l0_a + w1 * l1_a,
        w0 * l0_s + w1 * l1_s,
        (-tau + tau * ratio) * dlam_db,
        w1 * l1_c,
    ];
    (-lt + log_d, grad)
}

fn lin_half(p: &LinearDecoderParams, th: f64, dx: f64, dt: f64, mode: SplitMode) -> (f64, Tan) {
    match mode {
        SplitMode::Geometric => {
            let (v, g) = lin_mix(p, th, dx, dt);
            (0.5 * v, scale(&g, 0.5))
        }
        SplitMode::HalfStep => {
            let h = 0.5 * dt;
            let (l0, a, s, _) = lin_gauss(p, th, dx, h, 0.0);
            let (v, mut g) = lin_mix(p, th, dx, h);
            g[0] += a;
            g[1] += s;
            (v + l0, g)
        }
    }
}

fn normalize_t(v: &mut [f64], dv: &mut [Tan], d: f64) -> Result<()> {
    let mass = v.iter().sum::<f64>() * d;
    if !(mass > MASS_FLOOR) || !mass.is_finite() {
        return Err(Error::ZeroMass { mass });
    }
    let mut dm = [0.0; NP];
    for t in dv.iter() {
        axpy(&mut dm, d, t);
    }
    for (x, t) in v.iter_mut().zip(dv.iter_mut()) {
        *x /= mass;
        for p in 0..NP {
            t[p] = t[p] / mass - *x * dm[p] / mass;
        }
    }
    Ok(())
}

fn reweight_t(q: &mut [f64], dq: &mut [Tan], l: &[f64], dl: &[Tan], d: f64) -> Result<()> {
    let peak = q.iter().zip(l).filter(|(v, _)| **v > 0.0).map(|(_, x)| *x).fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::ZeroMass { mass: 0.0 });
    }
    for j in 0..q.len() {
        if q[j] > 0.0 {
            let e = (l[j] - peak).exp();
            let u = q[j] * e;
            let mut t = scale(&dq[j], e);
            axpy(&mut t, u, &dl[j]);
            q[j] = u;
            dq[j] = t;
        } else {
            dq[j] = [0.0; NP];
        }
    }
    normalize_t(q, dq, d)
}

/// Objective of one window and its gradient in raw coordinates.
pub fn window_objective_grad(decoder: &Decoder, setup: &ObjectiveSetup, window: &[f64]) -> Result<(WindowObjective, Vec<f64>)> {
    let p = match decoder {
        Decoder::Linear(p) if setup.epsilon.is_none() => *p,
        _ => {
            return Err(Error::InvalidParam(
                "analytic gradients are available for the untruncated linear decoder only".into(),
            ))
        }
    };
    decoder.validate()?;
    check_window(setup, window)?;
    let kernel = &setup.kernel;
    let grid = kernel.grid();
    let d = grid.delta_theta();
    let dt = setup.dt();
    let nodes: Vec<f64> = grid.nodes().collect();
    let g_len = nodes.len();

    let filtered = setup.belief == BeliefMode::Filtered;
    let mut pi = BeliefDensity::uniform(*grid).into_values();
    let mut dpi: Vec<Tan> = vec![[0.0; NP]; g_len];
    let (mut ll, mut kl) = (0.0, 0.0);
    let (mut dll, mut dkl) = ([0.0; NP], [0.0; NP]);
    let mut g = vec![0.0; g_len];
    let mut dg: Vec<Tan> = vec![[0.0; NP]; g_len];
    let mut half = vec![0.0; g_len];
    let mut dhalf: Vec<Tan> = vec![[0.0; NP]; g_len];
    for k in 0..setup.steps() {
        let dx = window[k + 1] - window[k];
        for j in 0..g_len {
            let (v, t) = lin_mix(&p, nodes[j], dx, dt);
            g[j] = v;
            dg[j] = t;
        }
        if filtered && k < setup.m {
            let mut prior = kernel.propagate(&pi);
            let mut dprior = kernel.propagate_tangent(&dpi);
            normalize_t(&mut prior, &mut dprior, d)?;
            for j in 0..g_len {
                let (v, t) = match setup.mode {
                    SplitMode::Geometric => (0.5 * g[j], scale(&dg[j], 0.5)),
                    SplitMode::HalfStep => lin_half(&p, nodes[j], dx, dt, SplitMode::HalfStep),
                };
                half[j] = v;
                dhalf[j] = t;
            }
            reweight_t(&mut pi, &mut dpi, &half, &dhalf, d)?;
            let mut v = kernel.propagate(&pi);
            let mut dv = kernel.propagate_tangent(&dpi);
            normalize_t(&mut v, &mut dv, d)?;
            pi = v;
            dpi = dv;
            reweight_t(&mut pi, &mut dpi, &half, &dhalf, d)?;
            for j in 0..g_len {
                if pi[j] <= MASS_FLOOR {
                    continue;
                }
                let floored = prior[j] <= MASS_FLOOR;
                let lr = (pi[j] / prior[j].max(MASS_FLOOR)).ln();
                kl += pi[j] * lr * d;
                axpy(&mut dkl, (lr + 1.0) * d, &dpi[j]);
                if !floored {
                    axpy(&mut dkl, -pi[j] / prior[j] * d, &dprior[j]);
                }
            }
        } else if filtered {
            let mut v = kernel.propagate(&pi);
            let mut dv = kernel.propagate_tangent(&dpi);
            normalize_t(&mut v, &mut dv, d)?;
            pi = v;
            dpi = dv;
        }
        for j in 0..g_len {
            if pi[j] > 0.0 {
                ll += pi[j] * g[j] * d;
                axpy(&mut dll, g[j] * d, &dpi[j]);
                axpy(&mut dll, pi[j] * d, &dg[j]);
            }
        }
    }
    let kl_w = setup.kl_weight;
    let grad: Vec<f64> = (0..NP).map(|i| dll[i] - kl_w * dkl[i]).collect();
    if !(ll.is_finite() && kl.is_finite()) || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective or gradient".into()));
    }
    Ok((WindowObjective { loglik: ll, kl: kl.max(0.0) }, grad))
}

/// Central-difference gradient of `f` at `x`, skipping coordinates in `frozen`.
pub fn fd_gradient<F>(f: F, x: &[f64], eps: f64, frozen: &[bool]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        if frozen.get(i).copied().unwrap_or(false) {
            continue;
        }
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("objective at perturbed coordinate {i}")));
        }
        g[i] = (up - down) / (2.0 * eps);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// Mean per-step objective at the evaluation point.
    pub objective: f64,
    /// Derivative of `objective` with respect to the raw coordinates.
    pub values: Vec<f64>,
}

fn frozen_mask(decoder: &Decoder, frozen: &[String]) -> Result<Vec<bool>> {
    let names = decoder.raw_names();
    if let Some(bad) = frozen.iter().find(|f| !names.contains(f)) {
        return Err(Error::InvalidParam(format!("unknown coordinate {bad:?}; expected one of {names:?}")));
    }
    Ok(names.iter().map(|n| frozen.contains(n)).collect())
}

/// Gradient of [`mean_objective`] over `windows`.
pub fn grad(decoder: &Decoder, windows: &[&[f64]], setup: &ObjectiveSetup, cfg: &TrainConfig) -> Result<Gradient> {
    if windows.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mask = frozen_mask(decoder, &cfg.frozen)?;
    let norm = (windows.len() * setup.steps()) as f64;
    match cfg.grad_mode {
        GradMode::Analytic => {
            let parts = windows
                .par_iter()
                .map(|w| window_objective_grad(decoder, setup, w))
                .collect::<Result<Vec<_>>>()?;
            let mut values = vec![0.0; NP];
            let mut total = 0.0;
            for (obj, g) in &parts {
                total += obj.loglik - setup.kl_weight * obj.kl;
                for (v, gi) in values.iter_mut().zip(g) {
                    *v += gi;
                }
            }
            let values = values.iter().zip(&mask).map(|(v, m)| if *m { 0.0 } else { v / norm }).collect();
            Ok(Gradient { objective: total / norm, values })
        }
        GradMode::FiniteDifference => {
            let x = decoder.to_raw();
            let f = |raw: &[f64]| mean_objective(&decoder.with_raw(raw)?, setup, windows);
            let objective = f(&x)?;
            let values = fd_gradient(f, &x, cfg.fd_eps, &mask)?;
            Ok(Gradient { objective, values })
        }
    }
}

/// Rescale `g` to norm at most `max_norm`; returns the norm before clipping.
pub fn clip_by_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_obj: f64,
    pub val_obj: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub decoder: Decoder,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochLog>,
}

impl FitResult {
    /// Columns `epoch,train_obj,val_obj,lr,grad_norm`.
    pub fn write_log_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for row in &self.history {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }
}

pub fn save_checkpoint(decoder: &Decoder, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(decoder)?;
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Decoder> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let d: Decoder = serde_json::from_str(&text)?;
    d.validate()?;
    Ok(d)
}

/// Adam ascent with norm clipping and a warm-up/cosine schedule. Returns the
/// parameters with the best validation objective (the initial point included).
/// With no validation windows the training objective is used instead.
pub fn fit(params0: &Decoder, train: &[&[f64]], val: &[&[f64]], setup: &ObjectiveSetup, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    params0.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mask = frozen_mask(params0, &cfg.frozen)?;
    let score_set = if val.is_empty() { train } else { val };
    let score = |d: &Decoder, epoch: usize| -> Result<f64> {
        match mean_objective(d, setup, score_set) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::ZeroMass { .. }) => Err(Error::Diverged { epoch }),
            Err(e) => Err(e),
        }
    };

    let mut x = params0.to_raw();
    let mut current = params0.clone();
    let mut m1 = vec![0.0; x.len()];
    let mut m2 = vec![0.0; x.len()];
    let mut t = 0i32;
    let mut best = (score(params0, 0)?, 0usize, params0.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut shuffler = rng::stream(cfg.seed, epoch as u64);
        order.shuffle(&mut shuffler);
        let (mut obj_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&[f64]> = chunk.iter().map(|i| train[*i]).collect();
            let mut g = match grad(&current, &batch, setup, cfg) {
                Ok(g) => g,
                Err(Error::NonFinite(_)) | Err(Error::ZeroMass { .. }) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            if !g.objective.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            obj_sum += g.objective;
            norm_sum += clip_by_norm(&mut g.values, cfg.clip_norm);
            batches += 1;
            t += 1;
            let bc1 = 1.0 - cfg.adam_beta1.powi(t);
            let bc2 = 1.0 - cfg.adam_beta2.powi(t);
            for i in 0..x.len() {
                if mask[i] {
                    continue;
                }
                m1[i] = cfg.adam_beta1 * m1[i] + (1.0 - cfg.adam_beta1) * g.values[i];
                m2[i] = cfg.adam_beta2 * m2[i] + (1.0 - cfg.adam_beta2) * g.values[i] * g.values[i];
                let step = (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + cfg.adam_eps);
                x[i] += lr * step - lr * cfg.weight_decay * x[i];
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            current = params0.with_raw(&x)?;
            if current.validate().is_err() {
                return Err(Error::Diverged { epoch });
            }
        }
        let val_obj = score(&current, epoch)?;
        let row = EpochLog {
            epoch: epoch + 1,
            train_obj: obj_sum / batches as f64,
            val_obj,
            lr,
            grad_norm: norm_sum / batches as f64,
        };
        log::info!("epoch {} train {:.6} val {:.6} lr {:.5} |g| {:.4}", row.epoch, row.train_obj, row.val_obj, lr, row.grad_norm);
        history.push(row);
        if val_obj > best.0 {
            best = (val_obj, epoch + 1, current.clone());
        }
    }
    Ok(FitResult { decoder: best.2, best_epoch: best.1, best_val: best.0, history })
}
