//! Raw kernel entry points with an explicit execution strategy, so the
//! bench suite can compare the sequential and parallel paths in one run.
//! Not part of the public API surface.

pub use crate::parallel::Exec;

use crate::render::{CameraPose, RenderConfig};

pub fn render_forward(
    exec: Exec,
    grid: &[f64],
    n: usize,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> (Vec<f64>, Vec<f64>) {
    crate::render::render_forward(exec, grid, n, pose, cfg)
}

pub fn render_backward(
    exec: Exec,
    n: usize,
    pose: &CameraPose,
    cfg: &RenderConfig,
    taus: &[f64],
    gout: &[f64],
) -> Vec<f64> {
    crate::render::render_backward(exec, n, pose, cfg, taus, gout)
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward(
    exec: Exec,
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    b: usize,
    ci: usize,
    co: usize,
    d: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    crate::graph::conv3d_forward_kernel(exec, x, w, bias, b, ci, co, d, h, wd, k)
}

pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    crate::graph::matmul_kernel_raw(exec, a, b, m, k, n)
}
