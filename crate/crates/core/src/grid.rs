//! Latent grid, belief densities and quadrature.
//!
//! All integrals use the rectangle rule with the uniform weight `delta_theta`
//! at every node, so `mass(q) = sum_j q_j * delta_theta`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this total mass a density is treated as empty.
pub const MASS_FLOOR: f64 = 1e-300;

/// Uniform discretization of a bounded latent interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    theta_min: f64,
    theta_max: f64,
    nodes: usize,
    delta_theta: f64,
}

impl LatentGrid {
    pub fn new(theta_min: f64, theta_max: f64, nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::InvalidParam(format!("grid needs at least 2 nodes, got {nodes}")));
        }
        if !(theta_min.is_finite() && theta_max.is_finite()) || theta_max <= theta_min {
            return Err(Error::InvalidParam(format!(
                "grid bounds must satisfy theta_min < theta_max (got {theta_min}, {theta_max})"
            )));
        }
        Ok(Self {
            theta_min,
            theta_max,
            nodes,
            delta_theta: (theta_max - theta_min) / (nodes - 1) as f64,
        })
    }

    pub fn theta_min(&self) -> f64 {
        self.theta_min
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    /// Number of nodes `G`.
    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn delta_theta(&self) -> f64 {
        self.delta_theta
    }

    pub fn node(&self, j: usize) -> f64 {
        self.theta_min + j as f64 * self.delta_theta
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.nodes).map(move |j| self.node(j))
    }

    /// Index of the node closest to `theta`, clamped to the grid.
    pub fn nearest(&self, theta: f64) -> usize {
        let pos = ((theta - self.theta_min) / self.delta_theta).round();
        if pos.is_nan() || pos <= 0.0 {
            0
        } else {
            (pos as usize).min(self.nodes - 1)
        }
    }
}

impl Default for LatentGrid {
    /// 401 nodes on `[-2, 2]`.
    fn default() -> Self {
        Self::new(-2.0, 2.0, 401).expect("default grid is valid")
    }
}

/// Nonnegative values on a [`LatentGrid`], optionally normalized to unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefDensity {
    values: Vec<f64>,
    grid: LatentGrid,
    normalized: bool,
}

impl BeliefDensity {
    /// Wraps raw nodal values. The result is flagged unnormalized.
    pub fn from_values(grid: LatentGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch { left: values.len(), right: grid.len() });
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParam(format!(
                "density value at node {j} is {} (must be finite and nonnegative)",
                values[j]
            )));
        }
        Ok(Self { values, grid, normalized: false })
    }

    /// Normalized constant density.
    pub fn uniform(grid: LatentGrid) -> Self {
        let height = 1.0 / (grid.len() as f64 * grid.delta_theta());
        Self { values: vec![height; grid.len()], grid, normalized: true }
    }

    /// All quadrature weight on node `j`.
    pub fn point_mass(grid: LatentGrid, j: usize) -> Result<Self> {
        if j >= grid.len() {
            return Err(Error::InvalidParam(format!("node {j} outside grid of {} nodes", grid.len())));
        }
        let mut values = vec![0.0; grid.len()];
        values[j] = 1.0 / grid.delta_theta();
        Ok(Self { values, grid, normalized: true })
    }

    /// Normalized discretized Gaussian, used for Gaussian initial beliefs.
    pub fn gaussian(grid: LatentGrid, mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(Error::InvalidParam(format!("gaussian sd must be positive, got {sd}")));
        }
        let values = grid
            .nodes()
            .map(|t| (-0.5 * ((t - mean) / sd).powi(2)).exp())
            .collect();
        normalize(&Self::from_values(grid, values)?)
    }

    pub(crate) fn from_normalized_unchecked(grid: LatentGrid, values: Vec<f64>) -> Self {
        Self { values, grid, normalized: true }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grid(&self) -> &LatentGrid {
        &self.grid
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `sum_j q_j * delta_theta`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.delta_theta()
    }

    /// Per-node probabilities `q_j * delta_theta`.
    pub fn probabilities(&self) -> Vec<f64> {
        let d = self.grid.delta_theta();
        self.values.iter().map(|v| v * d).collect()
    }

    /// `sum_j |a_j - b_j| * delta_theta`.
    pub fn l1_distance(&self, other: &BeliefDensity) -> f64 {
        l1_norm_diff(&self.values, &other.values, self.grid.delta_theta())
    }

    /// Differential entropy `-sum q log q * delta_theta` of a normalized density.
    pub fn entropy(&self) -> f64 {
        let d = self.grid.delta_theta();
        -self
            .values
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| v * v.ln())
            .sum::<f64>()
            * d
    }

    pub fn normalize(&self) -> Result<Self> {
        normalize(self)
    }

    fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::NotNormalized)
        }
    }

    /// Writes `theta,value` rows, one per node.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "theta,value").map_err(io)?;
        for (t, v) in self.grid.nodes().zip(&self.values) {
            writeln!(w, "{t},{v}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub(crate) fn l1_norm_diff(a: &[f64], b: &[f64], delta: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * delta
}

/// Rescales `q` to unit mass under the rectangle rule.
pub fn normalize(q: &BeliefDensity) -> Result<BeliefDensity> {
    let mass = q.mass();
    if !(mass > MASS_FLOOR) || !mass.is_finite() {
        return Err(Error::ZeroMass { mass });
    }
    let values = q.values.iter().map(|v| v / mass).collect();
    Ok(BeliefDensity { values, grid: q.grid, normalized: true })
}

/// Quadrature of a test function against a normalized density.
pub fn belief_feature<F: Fn(f64) -> f64>(pi: &BeliefDensity, phi: F) -> Result<f64> {
    pi.require_normalized()?;
    let d = pi.grid.delta_theta();
    Ok(pi
        .grid
        .nodes()
        .zip(&pi.values)
        .map(|(t, v)| phi(t) * v * d)
        .sum())
}

pub fn posterior_mean(pi: &BeliefDensity) -> Result<f64> {
    belief_feature(pi, |t| t)
}

/// Node with the largest density value (first one on ties).
pub fn posterior_mode(pi: &BeliefDensity) -> Result<f64> {
    pi.require_normalized()?;
    let mut best = 0;
    for (j, v) in pi.values.iter().enumerate() {
        if *v > pi.values[best] {
            best = j;
        }
    }
    Ok(pi.grid.node(best))
}

pub fn posterior_variance(pi: &BeliefDensity) -> Result<f64> {
    let m = posterior_mean(pi)?;
    belief_feature(pi, |t| (t - m) * (t - m))
}
