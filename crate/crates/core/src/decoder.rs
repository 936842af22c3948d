//! Parametric jump-diffusion decoders.
//!
//! A decoder maps `(t, x, beta, theta)` to local coefficients: drift `mu`,
//! diffusion `sigma`, jump intensity `lambda` and a jump-mark law. The base
//! families below depend on `theta` only; `t`, `x` and `beta` are accepted so
//! every family shares one calling convention with the filter.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};

/// Default Gauss–Hermite order for Gaussian marks.
pub const DEFAULT_QUAD_NODES: usize = 11;

const SIGMA_FLOOR: f64 = 1e-12;

/// Law of the additive jump displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpMarkDist {
    PointMass { c: f64 },
    Gaussian { mean: f64, sd: f64, quad_nodes: usize },
    /// Finite atoms `(z, w)` with weights summing to one.
    Discrete { atoms: Vec<(f64, f64)> },
}

impl JumpMarkDist {
    pub fn gaussian(mean: f64, sd: f64) -> Self {
        JumpMarkDist::Gaussian { mean, sd, quad_nodes: DEFAULT_QUAD_NODES }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            JumpMarkDist::PointMass { c } if c.is_finite() => Ok(()),
            JumpMarkDist::PointMass { c } => Err(Error::InvalidParam(format!("mark displacement {c}"))),
            JumpMarkDist::Gaussian { mean, sd, quad_nodes } => {
                if !mean.is_finite() || !(*sd > 0.0 && sd.is_finite()) {
                    return Err(Error::InvalidParam(format!("gaussian marks need finite mean and sd > 0 (got {mean}, {sd})")));
                }
                if *quad_nodes < 3 {
                    return Err(Error::InvalidParam(format!("quad_nodes must be >= 3, got {quad_nodes}")));
                }
                Ok(())
            }
            JumpMarkDist::Discrete { atoms } => {
                if atoms.is_empty() || atoms.iter().any(|(z, w)| !z.is_finite() || !(*w >= 0.0)) {
                    return Err(Error::InvalidParam("discrete marks need finite atoms with nonnegative weights".into()));
                }
                let total: f64 = atoms.iter().map(|a| a.1).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParam(format!("discrete mark weights sum to {total}")));
                }
                Ok(())
            }
        }
    }

    /// Nodes and weights used for integrals against the mark law.
    pub fn quadrature(&self) -> Vec<(f64, f64)> {
        match self {
            JumpMarkDist::PointMass { c } => vec![(*c, 1.0)],
            JumpMarkDist::Gaussian { mean, sd, quad_nodes } => gauss_hermite(*quad_nodes)
                .into_iter()
                .map(|(z, w)| (mean + sd * z, w))
                .collect(),
            JumpMarkDist::Discrete { atoms } => atoms.clone(),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            JumpMarkDist::PointMass { c } => *c,
            JumpMarkDist::Gaussian { mean, .. } => *mean,
            JumpMarkDist::Discrete { atoms } => atoms.iter().map(|(z, w)| z * w).sum(),
        }
    }

    pub fn second_moment(&self) -> f64 {
        match self {
            JumpMarkDist::PointMass { c } => c * c,
            JumpMarkDist::Gaussian { mean, sd, .. } => mean * mean + sd * sd,
            JumpMarkDist::Discrete { atoms } => atoms.iter().map(|(z, w)| z * z * w).sum(),
        }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            JumpMarkDist::PointMass { c } => *c,
            JumpMarkDist::Gaussian { mean, sd, .. } => {
                Normal::new(*mean, *sd).expect("validated gaussian marks").sample(rng)
            }
            JumpMarkDist::Discrete { atoms } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (z, w) in atoms {
                    acc += w;
                    if u < acc {
                        return *z;
                    }
                }
                atoms.last().map(|a| a.0).unwrap_or(0.0)
            }
        }
    }

    /// Law of the sum of `n` independent marks as Gaussian components
    /// `(shift, extra_variance, weight)`. Exact for every variant.
    pub fn n_fold(&self, n: usize) -> Vec<(f64, f64, f64)> {
        match self {
            JumpMarkDist::PointMass { c } => vec![(n as f64 * c, 0.0, 1.0)],
            JumpMarkDist::Gaussian { mean, sd, .. } => vec![(n as f64 * mean, n as f64 * sd * sd, 1.0)],
            JumpMarkDist::Discrete { atoms } => {
                let mut acc = vec![(0.0, 0.0, 1.0)];
                for _ in 0..n {
                    acc = acc
                        .iter()
                        .flat_map(|(s, v, w)| atoms.iter().map(move |(z, a)| (s + z, *v, w * a)))
                        .collect();
                }
                acc
            }
        }
    }
}

/// Gauss–Hermite rule for `E[f(Z)]`, `Z ~ N(0, 1)`. Returns `(node, weight)`
/// pairs whose weights sum to one.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1);
    // Newton iteration on orthonormal physicists' Hermite polynomials.
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (PIM4, 0.0);
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut rule: Vec<(f64, f64)> = x
        .iter()
        .zip(&w)
        .map(|(xi, wi)| (std::f64::consts::SQRT_2 * xi, wi / sqrt_pi))
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

/// Local coefficients at one latent value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderCoeffs {
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub marks: JumpMarkDist,
}

/// Scalar part of [`DecoderCoeffs`]; the mark law lives on the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalCoeffs {
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
}

/// `mu = a1 θ`, `sigma = sigma_x`, `lambda = (b1 θ)⁺`, point-mass marks at `c_x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDecoderParams {
    pub a1: f64,
    pub sigma_x: f64,
    pub b1: f64,
    pub c_x: f64,
}

impl From<crate::sim::ObsParams> for LinearDecoderParams {
    fn from(p: crate::sim::ObsParams) -> Self {
        Self { a1: p.a1, sigma_x: p.sigma_x, b1: p.b1, c_x: p.c_x }
    }
}

/// Polynomial coefficients in θ (lowest order first). The volatility
/// polynomial passes through softplus; the intensity polynomial is clamped at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyDecoderParams {
    pub drift_coeffs: Vec<f64>,
    pub vol_coeffs: Vec<f64>,
    pub intensity_coeffs: Vec<f64>,
    pub mark: JumpMarkDist,
}

/// Serialized as a JSON record tagged by `family`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Decoder {
    Linear(LinearDecoderParams),
    Poly(PolyDecoderParams),
}

/// Name of the positivity map applied to the polynomial volatility.
pub const VOL_MAP: &str = "softplus";

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

impl Decoder {
    pub fn validate(&self) -> Result<()> {
        match self {
            Decoder::Linear(p) => {
                if !(p.sigma_x > 0.0 && p.sigma_x.is_finite()) {
                    return Err(Error::InvalidParam(format!("linear decoder needs sigma_x > 0, got {}", p.sigma_x)));
                }
                if !(p.a1.is_finite() && p.b1.is_finite() && p.c_x.is_finite()) {
                    return Err(Error::InvalidParam("linear decoder coefficients must be finite".into()));
                }
                Ok(())
            }
            Decoder::Poly(p) => {
                if p.drift_coeffs.is_empty() || p.vol_coeffs.is_empty() || p.intensity_coeffs.is_empty() {
                    return Err(Error::InvalidParam("polynomial decoder needs nonempty coefficient arrays".into()));
                }
                let all = p.drift_coeffs.iter().chain(&p.vol_coeffs).chain(&p.intensity_coeffs);
                if all.clone().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidParam("polynomial coefficients must be finite".into()));
                }
                p.mark.validate()
            }
        }
    }

    #[inline]
    pub fn local(&self, _t: f64, _x: f64, _beta: f64, theta: f64) -> LocalCoeffs {
        match self {
            Decoder::Linear(p) => LocalCoeffs {
                mu: p.a1 * theta,
                sigma: p.sigma_x,
                lambda: (p.b1 * theta).max(0.0),
            },
            Decoder::Poly(p) => LocalCoeffs {
                mu: horner(&p.drift_coeffs, theta),
                sigma: softplus(horner(&p.vol_coeffs, theta)).max(SIGMA_FLOOR),
                lambda: horner(&p.intensity_coeffs, theta).max(0.0),
            },
        }
    }

    pub fn marks(&self) -> JumpMarkDist {
        match self {
            Decoder::Linear(p) => JumpMarkDist::PointMass { c: p.c_x },
            Decoder::Poly(p) => p.mark.clone(),
        }
    }

    pub fn eval_coeffs(&self, t: f64, x: f64, beta: f64, theta: f64) -> DecoderCoeffs {
        let l = self.local(t, x, beta, theta);
        DecoderCoeffs { mu: l.mu, sigma: l.sigma, lambda: l.lambda, marks: self.marks() }
    }

    /// Flat view of the trainable coordinates. `sigma_x` is carried on a log scale.
    pub fn to_raw(&self) -> Vec<f64> {
        match self {
            Decoder::Linear(p) => vec![p.a1, p.sigma_x.ln(), p.b1, p.c_x],
            Decoder::Poly(p) => {
                let mut v = p.drift_coeffs.clone();
                v.extend(&p.vol_coeffs);
                v.extend(&p.intensity_coeffs);
                v
            }
        }
    }

    /// Inverse of [`Decoder::to_raw`], using `self` for shapes and the mark law.
    pub fn with_raw(&self, raw: &[f64]) -> Result<Decoder> {
        let expect = self.to_raw().len();
        if raw.len() != expect {
            return Err(Error::LengthMismatch { left: raw.len(), right: expect });
        }
        Ok(match self {
            Decoder::Linear(_) => Decoder::Linear(LinearDecoderParams {
                a1: raw[0],
                sigma_x: raw[1].exp(),
                b1: raw[2],
                c_x: raw[3],
            }),
            Decoder::Poly(p) => {
                let (d, rest) = raw.split_at(p.drift_coeffs.len());
                let (v, i) = rest.split_at(p.vol_coeffs.len());
                Decoder::Poly(PolyDecoderParams {
                    drift_coeffs: d.to_vec(),
                    vol_coeffs: v.to_vec(),
                    intensity_coeffs: i.to_vec(),
                    mark: p.mark.clone(),
                })
            }
        })
    }

    pub fn raw_names(&self) -> Vec<String> {
        match self {
            Decoder::Linear(_) => ["a1", "log_sigma_x", "b1", "c_x"].iter().map(|s| s.to_string()).collect(),
            Decoder::Poly(p) => {
                let mut names = Vec::new();
                for (prefix, len) in [("drift", p.drift_coeffs.len()), ("vol", p.vol_coeffs.len()), ("intensity", p.intensity_coeffs.len())] {
                    names.extend((0..len).map(|k| format!("{prefix}_{k}")));
                }
                names
            }
        }
    }
}

/// Moments of the jumps below a truncation threshold, scaled by the intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallJumpSplit {
    pub epsilon: f64,
    /// `λ E[z 1{|z| ≤ ε}]`
    pub mu_tilde_add: f64,
    /// `λ E[z² 1{|z| ≤ ε}]`
    pub var_tilde_add: f64,
    /// `λ P(|z| > ε)`
    pub lambda_eps: f64,
}

/// Per-unit-intensity moments `(E[z 1{small}], E[z² 1{small}], P(large))`.
fn small_jump_moments(marks: &JumpMarkDist, epsilon: f64) -> (f64, f64, f64) {
    match marks {
        JumpMarkDist::PointMass { c } => {
            if c.abs() <= epsilon {
                (*c, c * c, 0.0)
            } else {
                (0.0, 0.0, 1.0)
            }
        }
        JumpMarkDist::Gaussian { mean, sd, .. } => {
            let std = StatNormal::new(0.0, 1.0).expect("standard normal");
            let a = (-epsilon - mean) / sd;
            let b = (epsilon - mean) / sd;
            let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let inside = std.cdf(b) - std.cdf(a);
            let m1 = mean * inside + sd * (pdf(a) - pdf(b));
            let m2 = mean * mean * inside
                + 2.0 * mean * sd * (pdf(a) - pdf(b))
                + sd * sd * (inside + a * pdf(a) - b * pdf(b));
            // tails computed directly to keep precision when they are tiny
            let large = std.cdf(a) + std.sf(b);
            (m1, m2, large)
        }
        JumpMarkDist::Discrete { atoms } => atoms.iter().fold((0.0, 0.0, 0.0), |(m1, m2, p), (z, w)| {
            if z.abs() <= epsilon {
                (m1 + z * w, m2 + z * z * w, p)
            } else {
                (m1, m2, p + w)
            }
        }),
    }
}

pub fn small_jump_absorb(marks: &JumpMarkDist, lambda: f64, epsilon: f64) -> Result<SmallJumpSplit> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParam(format!("truncation threshold must be positive, got {epsilon}")));
    }
    let (m1, m2, large) = small_jump_moments(marks, epsilon);
    Ok(SmallJumpSplit {
        epsilon,
        mu_tilde_add: lambda * m1,
        var_tilde_add: lambda * m2,
        lambda_eps: lambda * large,
    })
}

/// Conditional law of the marks given `|z| > ε`, or `None` when no mass remains.
pub fn large_jump_law(marks: &JumpMarkDist, epsilon: f64) -> Option<JumpMarkDist> {
    match marks {
        JumpMarkDist::PointMass { c } => (c.abs() > epsilon).then(|| marks.clone()),
        JumpMarkDist::Discrete { atoms } => {
            let kept: Vec<(f64, f64)> = atoms.iter().copied().filter(|(z, _)| z.abs() > epsilon).collect();
            let total: f64 = kept.iter().map(|a| a.1).sum();
            (total > 0.0).then(|| JumpMarkDist::Discrete {
                atoms: kept.into_iter().map(|(z, w)| (z, w / total)).collect(),
            })
        }
        JumpMarkDist::Gaussian { mean, sd, quad_nodes } => {
            // equal-probability bins in each tail, one atom per bin at its conditional mean
            let law = StatNormal::new(*mean, *sd).expect("validated gaussian marks");
            let lo = law.cdf(-epsilon);
            let hi = law.sf(epsilon);
            let total = lo + hi;
            if !(total > 0.0) {
                return None;
            }
            let phi = |z: f64| {
                if z.is_infinite() {
                    0.0
                } else {
                    let u = (z - mean) / sd;
                    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
                }
            };
            // E[z 1{a<z<b}] for a bin with probability p
            let bin_mean = |a: f64, b: f64, p: f64| mean + sd * (phi(a) - phi(b)) / p;
            let per_tail = *quad_nodes;
            let mut atoms = Vec::with_capacity(2 * per_tail);
            for (tail_p, lower) in [(lo, true), (hi, false)] {
                if !(tail_p > 0.0) {
                    continue;
                }
                let p = tail_p / per_tail as f64;
                let edge = |k: usize| {
                    if lower {
                        if k == 0 { f64::NEG_INFINITY } else if k == per_tail { -epsilon } else { law.inverse_cdf(k as f64 * p) }
                    } else if k == 0 {
                        epsilon
                    } else if k == per_tail {
                        f64::INFINITY
                    } else {
                        law.inverse_cdf(1.0 - hi + k as f64 * p)
                    }
                };
                for k in 0..per_tail {
                    atoms.push((bin_mean(edge(k), edge(k + 1), p), p / total));
                }
            }
            Some(JumpMarkDist::Discrete { atoms })
        }
    }
}

/// A decoder plus the quantities the filter needs on every node evaluation.
///
/// With a truncation threshold, small jumps are folded into the drift and
/// diffusion and only the large-jump intensity and mark law remain explicit.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    decoder: Decoder,
    epsilon: Option<f64>,
    small: (f64, f64, f64),
    marks: JumpMarkDist,
    quadrature: Vec<(f64, f64)>,
}

impl ObservationModel {
    pub fn new(decoder: Decoder, epsilon: Option<f64>) -> Result<Self> {
        decoder.validate()?;
        let raw_marks = decoder.marks();
        let (small, marks) = match epsilon {
            Some(eps) => {
                if !(eps > 0.0) {
                    return Err(Error::InvalidParam(format!("truncation threshold must be positive, got {eps}")));
                }
                let small = small_jump_moments(&raw_marks, eps);
                let marks = large_jump_law(&raw_marks, eps).unwrap_or(JumpMarkDist::PointMass { c: 0.0 });
                (small, marks)
            }
            None => ((0.0, 0.0, 1.0), raw_marks),
        };
        let quadrature = marks.quadrature();
        Ok(Self { decoder, epsilon, small, marks, quadrature })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    /// Coefficients used by the likelihoods: the tilde-coefficients when a
    /// truncation threshold is set, the raw ones otherwise.
    #[inline]
    pub fn coeffs(&self, t: f64, x: f64, beta: f64, theta: f64) -> LocalCoeffs {
        let raw = self.decoder.local(t, x, beta, theta);
        if self.epsilon.is_none() {
            return raw;
        }
        let (m1, m2, large) = self.small;
        LocalCoeffs {
            mu: raw.mu + raw.lambda * m1,
            sigma: (raw.sigma * raw.sigma + raw.lambda * m2).sqrt(),
            lambda: raw.lambda * large,
        }
    }

    /// Explicit jump-mark law (the large-jump law under truncation).
    pub fn marks(&self) -> &JumpMarkDist {
        &self.marks
    }

    pub fn mark_quadrature(&self) -> &[(f64, f64)] {
        &self.quadrature
    }
}

impl TryFrom<Decoder> for ObservationModel {
    type Error = Error;

    fn try_from(d: Decoder) -> Result<Self> {
        ObservationModel::new(d, None)
    }
}
