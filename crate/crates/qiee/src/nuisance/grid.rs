//! Grid-interpolated families theta -> F(theta | x): one regression per node,
//! linear interpolation between nodes, flat outside the grid.

use super::features::FeatureMatrix;
use super::glm::{constant_binary, fit_binary_from, fit_linear_glm, BinaryProbModel, LinearModel};
use super::{LearnerKind, LearnerSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum NodeModel {
    Binary(BinaryProbModel),
    Linear(LinearModel),
}

impl NodeModel {
    fn predict_row(&self, raw: &[f64]) -> f64 {
        match self {
            NodeModel::Binary(m) => m.predict_row(raw),
            NodeModel::Linear(m) => m.predict_row(raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaIndexedCdfModel {
    grid: Vec<f64>,
    nodes: Vec<NodeModel>,
    isotonic: bool,
}

impl ThetaIndexedCdfModel {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Node outputs at a feature row, clipped to [0, 1].
    pub fn node_values(&self, raw: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .nodes
            .iter()
            .map(|m| m.predict_row(raw).clamp(0.0, 1.0))
            .collect();
        if self.isotonic {
            isotonic_in_place(&mut v);
        }
        v
    }

    pub fn eval(&self, raw: &[f64], theta: f64) -> f64 {
        interpolate(&self.grid, &self.node_values(raw), theta)
    }

    pub fn density(&self, raw: &[f64], theta: f64) -> f64 {
        grid_density(&self.grid, &self.node_values(raw), theta)
    }
}

/// Linear interpolation with flat extension outside the grid.
pub fn interpolate(grid: &[f64], values: &[f64], theta: f64) -> f64 {
    let r = grid.len();
    if theta <= grid[0] {
        return values[0];
    }
    if theta >= grid[r - 1] {
        return values[r - 1];
    }
    let k = grid.partition_point(|&g| g <= theta) - 1;
    let w = (theta - grid[k]) / (grid[k + 1] - grid[k]);
    values[k] + w * (values[k + 1] - values[k])
}

/// Central finite differences at the nodes, interpolated linearly; zero
/// outside the grid where the family is flat.
pub fn grid_density(grid: &[f64], values: &[f64], theta: f64) -> f64 {
    let r = grid.len();
    if theta < grid[0] || theta > grid[r - 1] {
        return 0.0;
    }
    let slope = |k: usize| -> f64 {
        let (a, b) = (k.saturating_sub(1), (k + 1).min(r - 1));
        (values[b] - values[a]) / (grid[b] - grid[a])
    };
    if theta == grid[r - 1] {
        return slope(r - 1);
    }
    let k = grid.partition_point(|&g| g <= theta) - 1;
    let w = (theta - grid[k]) / (grid[k + 1] - grid[k]);
    slope(k) + w * (slope(k + 1) - slope(k))
}

/// Pool-adjacent-violators for a nondecreasing fit with equal weights.
pub(crate) fn isotonic_in_place(v: &mut [f64]) {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(v.len());
    for &x in v.iter() {
        blocks.push((x, 1));
        while blocks.len() > 1 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let c = c1 + c2;
            *blocks.last_mut().unwrap() = ((m1 * c1 as f64 + m2 * c2 as f64) / c as f64, c);
        }
    }
    let mut i = 0;
    for (m, c) in blocks {
        for x in &mut v[i..i + c] {
            *x = m;
        }
        i += c;
    }
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Argument("grid needs at least two nodes".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Argument("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Fits one node model per grid point. `targets(r, theta_r)` returns the
/// node-r responses for the rows of `x`. Nodes whose responses are all 0 or
/// all 1 get a constant model.
pub fn fit_grid_cdf_family(
    spec: &LearnerSpec,
    x: &FeatureMatrix,
    mut targets: impl FnMut(usize, f64) -> Vec<f64>,
    grid: &[f64],
) -> Result<ThetaIndexedCdfModel> {
    check_grid(grid)?;
    let warm = |nodes: &[NodeModel]| match nodes.last() {
        Some(NodeModel::Binary(m)) => Some(m.coefficients().to_vec()),
        _ => None,
    };
    let mut nodes: Vec<NodeModel> = Vec::with_capacity(grid.len());
    for (r, &theta) in grid.iter().enumerate() {
        let y = targets(r, theta);
        let node = match spec.node_kind {
            LearnerKind::LinearGlm => NodeModel::Linear(fit_linear_glm(x, &y, spec)?),
            kind => match fit_binary_from(x, &y, spec, kind, 0.0, warm(&nodes).as_deref()) {
                Ok(m) => NodeModel::Binary(m),
                Err(Error::DegenerateLabels(_)) => {
                    let p = y.iter().sum::<f64>() / y.len().max(1) as f64;
                    NodeModel::Binary(constant_binary(x, p.round(), 0.0))
                }
                Err(e) => return Err(e),
            },
        };
        nodes.push(node);
    }
    Ok(ThetaIndexedCdfModel {
        grid: grid.to_vec(),
        nodes,
        isotonic: spec.isotonic,
    })
}
