//! Differentiable soft thresholding of occupancy values for training, and
//! hard thresholding for inference/export.
//!
//! The soft form is the increasing logistic sigma(beta * (x - gamma)): 0.5
//! exactly at the threshold, saturating to 1 for occupied and 0 for empty
//! values, and recovering the hard step as beta grows. The hard form marks
//! a voxel occupied iff its value is strictly greater than gamma, which
//! keeps the soft function's midpoint aligned with the hard tie-break.

use crate::error::{Result, ZfError};
use crate::generator::VoxelGrid;
use crate::graph::{Graph, VarId};
use crate::tensor::{stable_sigmoid, Tensor};

/// Temperature values used by the ablation presets.
pub const BETA_PRESETS: [f64; 3] = [100.0, 200.0, 300.0];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BinarizationParams {
    /// Temperature: trades approximation tightness against gradient
    /// smoothness.
    pub beta: f64,
    /// Occupancy threshold.
    pub gamma: f64,
}

impl Default for BinarizationParams {
    fn default() -> Self {
        BinarizationParams {
            beta: 200.0,
            gamma: 0.05,
        }
    }
}

impl BinarizationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(ZfError::Parameter(format!(
                "binarization beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if !self.gamma.is_finite() {
            return Err(ZfError::Parameter("binarization gamma must be finite".into()));
        }
        Ok(())
    }
}

/// Scalar soft binarization; the elementwise map applied everywhere.
pub fn soft_value(x: f64, params: &BinarizationParams) -> f64 {
    stable_sigmoid(params.beta * (x - params.gamma))
}

/// Analytic derivative of [`soft_value`] w.r.t. x: beta * s * (1 - s).
pub fn soft_derivative(x: f64, params: &BinarizationParams) -> f64 {
    let s = soft_value(x, params);
    params.beta * s * (1.0 - s)
}

/// Elementwise logistic of beta*(x - gamma); output strictly in (0,1).
pub fn binarize_soft(grid: &VoxelGrid, params: &BinarizationParams) -> Result<VoxelGrid> {
    params.validate()?;
    VoxelGrid::new(grid.values().map(|v| soft_value(v, params)), false)
}

/// Hard threshold: 1 where value > gamma, else 0. Inference/export only.
pub fn binarize_hard(grid: &VoxelGrid, gamma: f64) -> VoxelGrid {
    let values = grid
        .values()
        .map(|v| if v > gamma { 1.0 } else { 0.0 });
    VoxelGrid::new(values, true).expect("hard binarization produces {0,1}")
}

/// Graph version of [`binarize_soft`] for a var of any shape. Evaluates the
/// same elementwise map as the plain version (bit-identical values) with
/// the analytic derivative beta * s * (1 - s).
pub fn binarize_soft_vars(
    graph: &mut Graph,
    values: VarId,
    params: &BinarizationParams,
) -> Result<VarId> {
    params.validate()?;
    let p = *params;
    let input = graph.value(values).clone();
    let out = input.map(|v| soft_value(v, &p));
    Ok(graph.push(out, &[values], move |g| {
        let gx = Tensor::from_vec(
            input.shape().to_vec(),
            g.data()
                .iter()
                .zip(input.data())
                .map(|(g, x)| g * soft_derivative(*x, &p))
                .collect(),
        );
        vec![(values, gx)]
    }))
}
