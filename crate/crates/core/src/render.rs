//! Camera sampling over the unit sphere and the differentiable voxel
//! rendering layer, plus a pluggable slot for an external renderer.
//!
//! The built-in renderer is an absorption-only ray marcher: the grid
//! occupies the world cube [-1,1]^3, each pixel's ray is clipped to that
//! cube and sampled at uniform steps with trilinear interpolation, step
//! opacities alpha_k = 1 - exp(-density_k * dt) composite to
//! 1 - prod(1 - alpha_k), and the result is lifted onto the configured
//! background. Step length is measured in voxel units so a fully occupied
//! grid saturates regardless of resolution. Every pixel is differentiable
//! w.r.t. every voxel value.

use crate::error::{Result, ZfError};
use crate::generator::VoxelGrid;
use crate::graph::{Graph, VarId};
use crate::parallel::{map_indexed, Exec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Vertical field of view (degrees); fixed so runs are reproducible.
pub const FOV_DEGREES: f64 = 40.0;

/// Default camera distance: 2.2x the grid half-extent.
pub const DEFAULT_RADIUS: f64 = 2.2;

/// The camera must sit outside the grid's bounding sphere (radius sqrt(3)).
const MIN_RADIUS: f64 = 1.7320508075688772;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Radians in [0, 2*pi).
    pub azimuth: f64,
    /// Radians in [0, pi], measured from the +z pole.
    pub polar: f64,
    /// Distance from the grid center, in grid half-extents.
    pub radius: f64,
}

impl CameraPose {
    pub fn new(azimuth: f64, polar: f64) -> Result<Self> {
        CameraPose::with_radius(azimuth, polar, DEFAULT_RADIUS)
    }

    pub fn with_radius(azimuth: f64, polar: f64, radius: f64) -> Result<Self> {
        let pose = CameraPose {
            azimuth,
            polar,
            radius,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::TAU).contains(&self.azimuth) {
            return Err(ZfError::Parameter(format!(
                "azimuth {} out of [0, 2pi)",
                self.azimuth
            )));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.polar) {
            return Err(ZfError::Parameter(format!(
                "polar {} out of [0, pi]",
                self.polar
            )));
        }
        if !(self.radius > MIN_RADIUS) {
            return Err(ZfError::Parameter(format!(
                "radius {} places the camera inside the grid's bounding sphere",
                self.radius
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Perspective,
}

#[derive(Debug, Clone)]
pub struct RenderConfig {
    /// Rendered image side length in pixels (pre-resize).
    pub image_size: usize,
    /// Ray sample count; `None` means 2N for an N^3 grid.
    pub steps_per_ray: Option<usize>,
    /// Background intensity in [0,1].
    pub background: f64,
    pub projection: Projection,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            image_size: 224,
            steps_per_ray: None,
            background: 0.0,
            projection: Projection::Perspective,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self, grid_resolution: usize) -> Result<()> {
        if self.image_size == 0 {
            return Err(ZfError::Parameter("image_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(ZfError::Parameter(format!(
                "background {} out of [0,1]",
                self.background
            )));
        }
        let steps = self.steps(grid_resolution);
        if steps < grid_resolution {
            return Err(ZfError::Parameter(format!(
                "steps_per_ray {steps} below grid resolution {grid_resolution}; rays would skip voxels"
            )));
        }
        Ok(())
    }

    pub fn steps(&self, grid_resolution: usize) -> usize {
        self.steps_per_ray.unwrap_or(2 * grid_resolution)
    }
}

/// Inverse-CDF map from unit-square samples to uniform sphere directions:
/// azimuth = 2*pi*u, polar = arccos(1 - 2v).
pub fn pose_from_uniform(u: f64, v: f64) -> CameraPose {
    CameraPose {
        azimuth: std::f64::consts::TAU * u,
        polar: (1.0 - 2.0 * v).clamp(-1.0, 1.0).acos(),
        radius: DEFAULT_RADIUS,
    }
}

/// Draw viewing angles uniformly over the unit sphere.
pub fn sample_camera(rng: &mut Rng) -> CameraPose {
    let u = rng.next_f64();
    let v = rng.next_f64();
    pose_from_uniform(u, v)
}

struct RaySetup {
    origin: [f64; 3],
    forward: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    tan_half_fov: f64,
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn ray_setup(pose: &CameraPose) -> RaySetup {
    let (st, ct) = pose.azimuth.sin_cos();
    let (sp, cp) = pose.polar.sin_cos();
    let dir = [sp * ct, sp * st, cp];
    let origin = [pose.radius * dir[0], pose.radius * dir[1], pose.radius * dir[2]];
    let forward = [-dir[0], -dir[1], -dir[2]];
    // Up reference flips to +x near the poles.
    let up_ref = if forward[2].abs() > 0.999 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let right = normalize3(cross3(forward, up_ref));
    let up = cross3(right, forward);
    RaySetup {
        origin,
        forward,
        right,
        up,
        tan_half_fov: (FOV_DEGREES.to_radians() / 2.0).tan(),
    }
}

/// Ray through pixel (row, col) with half-pixel centers; top row looks up.
fn pixel_ray(setup: &RaySetup, s: usize, row: usize, col: usize) -> [f64; 3] {
    let x_ndc = 2.0 * (col as f64 + 0.5) / s as f64 - 1.0;
    let y_ndc = 1.0 - 2.0 * (row as f64 + 0.5) / s as f64;
    normalize3([
        setup.forward[0] + setup.tan_half_fov * (x_ndc * setup.right[0] + y_ndc * setup.up[0]),
        setup.forward[1] + setup.tan_half_fov * (x_ndc * setup.right[1] + y_ndc * setup.up[1]),
        setup.forward[2] + setup.tan_half_fov * (x_ndc * setup.right[2] + y_ndc * setup.up[2]),
    ])
}

/// Clip a ray to the [-1,1]^3 cube. Returns (t_enter, t_exit) or None.
fn clip_to_cube(origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((-1.0 - origin[a]) * inv, (1.0 - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t1 > t0 {
        Some((t0, t1))
    } else {
        None
    }
}

/// Trilinear sample with zero padding outside the grid. Visits up to 8
/// corner voxels through `visit(index, weight)`.
#[inline]
fn trilinear_visit(n: usize, p: [f64; 3], mut visit: impl FnMut(usize, f64)) {
    let nf = n as f64;
    let mut base = [0isize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let u = (p[a] + 1.0) * 0.5 * nf - 0.5;
        let f = u.floor();
        base[a] = f as isize;
        frac[a] = u - f;
    }
    for corner in 0..8 {
        let dx = corner & 1;
        let dy = (corner >> 1) & 1;
        let dz = (corner >> 2) & 1;
        let ix = base[0] + dx as isize;
        let iy = base[1] + dy as isize;
        let iz = base[2] + dz as isize;
        if ix < 0 || iy < 0 || iz < 0 || ix >= n as isize || iy >= n as isize || iz >= n as isize {
            continue;
        }
        let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
            * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
            * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
        if w == 0.0 {
            continue;
        }
        visit(((ix as usize * n) + iy as usize) * n + iz as usize, w);
    }
}

/// Forward march. Returns (pixel intensities [S*S], optical depths [S*S]).
pub(crate) fn render_forward(
    exec: Exec,
    grid: &[f64],
    n: usize,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> (Vec<f64>, Vec<f64>) {
    let s = cfg.image_size;
    let steps = cfg.steps(n);
    let setup = ray_setup(pose);
    let bg = cfg.background;
    let rows: Vec<Vec<(f64, f64)>> = map_indexed(exec, s, s * steps * 16, |row| {
        let mut out = Vec::with_capacity(s);
        for col in 0..s {
            let dir = pixel_ray(&setup, s, row, col);
            let mut tau = 0.0;
            if let Some((t0, t1)) = clip_to_cube(setup.origin, dir) {
                let dt = (t1 - t0) / steps as f64;
                let dt_vox = dt * n as f64 * 0.5;
                for k in 0..steps {
                    let t = t0 + (k as f64 + 0.5) * dt;
                    let p = [
                        setup.origin[0] + t * dir[0],
                        setup.origin[1] + t * dir[1],
                        setup.origin[2] + t * dir[2],
                    ];
                    let mut density = 0.0;
                    trilinear_visit(n, p, |idx, w| density += w * grid[idx]);
                    tau += density * dt_vox;
                }
            }
            // bg + (1-bg) * (1 - exp(-tau)); exact background for tau = 0.
            let pixel = bg + (1.0 - bg) * (-(-tau).exp_m1());
            out.push((pixel, tau));
        }
        out
    });
    let mut pixels = Vec::with_capacity(s * s);
    let mut taus = Vec::with_capacity(s * s);
    for row in rows {
        for (p, t) in row {
            pixels.push(p);
            taus.push(t);
        }
    }
    (pixels, taus)
}

/// Gradient of the pixel intensities w.r.t. the voxel grid. `gout` is the
/// per-pixel gradient [S*S]; `taus` the forward pass's optical depths.
/// Per-row contributions are folded in fixed row order, so the result is
/// identical no matter how the rows were scheduled.
pub(crate) fn render_backward(
    exec: Exec,
    n: usize,
    pose: &CameraPose,
    cfg: &RenderConfig,
    taus: &[f64],
    gout: &[f64],
) -> Vec<f64> {
    let s = cfg.image_size;
    let steps = cfg.steps(n);
    let setup = ray_setup(pose);
    let bg = cfg.background;
    let mut grad = vec![0.0; n * n * n];
    // Bounded memory: batches of rows, each row yielding a sparse list.
    for batch in (0..s).collect::<Vec<_>>().chunks(16) {
        let batch = batch.to_vec();
        let parts: Vec<Vec<(usize, f64)>> = map_indexed(exec, batch.len(), s * steps * 16, |bi| {
            let row = batch[bi];
            let mut contrib = Vec::new();
            for col in 0..s {
                let g_pix = gout[row * s + col];
                if g_pix == 0.0 {
                    continue;
                }
                let dir = pixel_ray(&setup, s, row, col);
                let Some((t0, t1)) = clip_to_cube(setup.origin, dir) else {
                    continue;
                };
                let dt = (t1 - t0) / steps as f64;
                let dt_vox = dt * n as f64 * 0.5;
                // d pixel / d tau = (1-bg) exp(-tau)
                let coef = g_pix * (1.0 - bg) * (-taus[row * s + col]).exp() * dt_vox;
                if coef == 0.0 {
                    continue;
                }
                for k in 0..steps {
                    let t = t0 + (k as f64 + 0.5) * dt;
                    let p = [
                        setup.origin[0] + t * dir[0],
                        setup.origin[1] + t * dir[1],
                        setup.origin[2] + t * dir[2],
                    ];
                    trilinear_visit(n, p, |idx, w| contrib.push((idx, coef * w)));
                }
            }
            contrib
        });
        for part in parts {
            for (idx, v) in part {
                grad[idx] += v;
            }
        }
    }
    grad
}

/// Differentiable render of a [N,N,N] grid var to a [3,S,S] image var.
pub fn render_vars(
    graph: &mut Graph,
    grid: VarId,
    pose: &CameraPose,
    cfg: &RenderConfig,
) -> Result<VarId> {
    let shape = graph.value(grid).shape().to_vec();
    if shape.len() != 3 || shape[0] != shape[1] || shape[1] != shape[2] {
        return Err(ZfError::Shape(format!(
            "render expects a [N,N,N] grid, got {shape:?}"
        )));
    }
    let n = shape[0];
    pose.validate()?;
    cfg.validate(n)?;
    let s = cfg.image_size;
    let (pixels, taus) = render_forward(Exec::auto(), graph.value(grid).data(), n, pose, cfg);
    let mut rgb = Vec::with_capacity(3 * s * s);
    for _ in 0..3 {
        rgb.extend_from_slice(&pixels);
    }
    let out = Tensor::from_vec(vec![3, s, s], rgb);
    let pose = *pose;
    let cfg = cfg.clone();
    Ok(graph.push(out, &[grid], move |g| {
        let mut gsum = vec![0.0; s * s];
        for c in 0..3 {
            for (acc, gv) in gsum.iter_mut().zip(&g.data()[c * s * s..(c + 1) * s * s]) {
                *acc += gv;
            }
        }
        let ggrid = render_backward(Exec::auto(), n, &pose, &cfg, &taus, &gsum);
        vec![(grid, Tensor::from_vec(vec![n, n, n], ggrid))]
    }))
}

/// Render a soft-binarized grid to a [3,S,S] image in [0,1].
pub fn render(grid: &VoxelGrid, pose: &CameraPose, cfg: &RenderConfig) -> Result<Tensor> {
    if grid.values().data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(ZfError::Contract(
            "render input must be soft-binarized to [0,1]".into(),
        ));
    }
    let mut graph = Graph::new();
    let g = graph.constant(grid.values().clone());
    let img = render_vars(&mut graph, g, pose, cfg)?;
    Ok(graph.value(img).clone())
}

/// Bilinear resize of a [3,S,S] image to the encoder's input side length.
/// Bitwise identity when the sizes already match.
pub fn resize_to_encoder(image: &Tensor, target: usize) -> Result<Tensor> {
    let s = image.shape().to_vec();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(ZfError::Shape(format!(
            "resize expects [3,S,S], got {s:?}"
        )));
    }
    let mut graph = Graph::new();
    let img = graph.constant(image.reshape(vec![1, 3, s[1], s[2]]));
    let out = graph.resize_bilinear(img, target);
    Ok(graph.value(out).reshape(vec![3, target, target]))
}

/// Differentiable grid+pose -> image function with a declared output
/// resolution; the slot the external neural voxel renderer plugs into.
pub trait VoxelRenderer: Send + Sync {
    fn output_resolution(&self) -> usize;
    fn render_vars(&self, graph: &mut Graph, grid: VarId, pose: &CameraPose) -> Result<VarId>;
}

/// The analytic ray marcher behind the [`VoxelRenderer`] interface.
#[derive(Debug, Clone)]
pub struct BuiltinRenderer {
    pub config: RenderConfig,
}

impl BuiltinRenderer {
    pub fn new(config: RenderConfig) -> Self {
        BuiltinRenderer { config }
    }
}

impl VoxelRenderer for BuiltinRenderer {
    fn output_resolution(&self) -> usize {
        self.config.image_size
    }

    fn render_vars(&self, graph: &mut Graph, grid: VarId, pose: &CameraPose) -> Result<VarId> {
        render_vars(graph, grid, pose, &self.config)
    }
}

/// Write a [3,S,S] image in [0,1] as an 8-bit RGB PNG.
pub fn write_png(path: &std::path::Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(ZfError::Shape(format!(
            "PNG export expects [3,S,S], got {shape:?}"
        )));
    }
    let s = shape[1];
    let mut bytes = Vec::with_capacity(3 * s * s);
    for row in 0..s {
        for col in 0..s {
            for c in 0..3 {
                let v = image.data()[(c * s + row) * s + col].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), s as u32, s as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| ZfError::Format {
            path: path.to_path_buf(),
            message: format!("PNG header write failed: {e}"),
        })?;
    writer.write_image_data(&bytes).map_err(|e| ZfError::Format {
        path: path.to_path_buf(),
        message: format!("PNG data write failed: {e}"),
    })?;
    Ok(())
}

/// Delegate to an external renderer plugin; the contract is identical to
/// [`render`].
pub fn render_external(
    grid: &VoxelGrid,
    pose: &CameraPose,
    plugin: Option<&dyn VoxelRenderer>,
) -> Result<Tensor> {
    let Some(plugin) = plugin else {
        return Err(ZfError::Config(
            "no external renderer plugin configured; use the built-in renderer (render.plugin = builtin)"
                .into(),
        ));
    };
    if grid.values().data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(ZfError::Contract(
            "render input must be soft-binarized to [0,1]".into(),
        ));
    }
    let mut graph = Graph::new();
    let g = graph.constant(grid.values().clone());
    let img = plugin.render_vars(&mut graph, g, pose)?;
    Ok(graph.value(img).clone())
}
