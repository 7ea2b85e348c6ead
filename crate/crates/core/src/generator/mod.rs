//! The generator G = D ∘ F: a conditional RealNVP latent flow mapping text
//! embeddings to shape codes, and an occupancy decoder evaluated on grid
//! vertices, with optional zero-convolution adaptation of the decoder.

mod decoder;
mod flow;

pub use decoder::{decoder_channels, TUNED_INFIX, ZEROCONV_INFIX};
pub use flow::final_layer_names;

use crate::encoders::EmbeddingBatch;
use crate::error::{Result, ZfError};
use crate::graph::{Graph, VarId};
use crate::params::{GraphParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default latent width of the shape code.
pub const DEFAULT_LATENT_DIM: usize = 128;

/// A single shape code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    z: Vec<f64>,
}

impl LatentCode {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ZfError::Parameter("latent code entries must be finite".into()));
        }
        Ok(LatentCode { z })
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }
}

/// Batch of latent codes, stored as a [B,d] matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    codes: Tensor,
}

impl LatentBatch {
    pub fn from_tensor(codes: Tensor) -> Result<Self> {
        if codes.shape().len() != 2 || codes.shape()[0] == 0 {
            return Err(ZfError::Shape(format!(
                "latent batch must be [B,d] with B >= 1, got {:?}",
                codes.shape()
            )));
        }
        if !codes.is_finite() {
            return Err(ZfError::Parameter("latent entries must be finite".into()));
        }
        Ok(LatentBatch { codes })
    }

    pub fn from_codes(codes: &[LatentCode]) -> Result<Self> {
        if codes.is_empty() {
            return Err(ZfError::Shape("latent batch must have B >= 1".into()));
        }
        let d = codes[0].dim();
        let mut data = Vec::with_capacity(codes.len() * d);
        for c in codes {
            if c.dim() != d {
                return Err(ZfError::Shape("latent codes have mixed dims".into()));
            }
            data.extend_from_slice(c.as_slice());
        }
        Ok(LatentBatch {
            codes: Tensor::from_vec(vec![codes.len(), d], data),
        })
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.codes
    }

    pub fn code(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.codes.data()[i * d..(i + 1) * d]
    }
}

/// Dense cubic occupancy field.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    values: Tensor,
    resolution: usize,
    binarized: bool,
}

impl VoxelGrid {
    pub fn new(values: Tensor, binarized: bool) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[0] != s[1] || s[1] != s[2] || s[0] == 0 {
            return Err(ZfError::Shape(format!(
                "voxel grid must be [N,N,N], got {s:?}"
            )));
        }
        if binarized && values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(ZfError::Contract(
                "binarized grid must contain only {0,1}".into(),
            ));
        }
        let resolution = s[0];
        Ok(VoxelGrid {
            values,
            resolution,
            binarized,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn binarized(&self) -> bool {
        self.binarized
    }

    /// Number of occupied voxels; only meaningful for binarized grids.
    pub fn occupied_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }

    /// Trilinear resample of a soft grid to a new resolution (voxel-center
    /// aligned, clamped at the borders). Identity when the resolution
    /// already matches. Binarized grids must be resampled before
    /// thresholding, not after.
    pub fn resample(&self, resolution: usize) -> Result<VoxelGrid> {
        if self.binarized {
            return Err(ZfError::Contract(
                "resample soft occupancies, then re-binarize".into(),
            ));
        }
        if resolution == 0 {
            return Err(ZfError::Parameter("resolution must be positive".into()));
        }
        if resolution == self.resolution {
            return Ok(self.clone());
        }
        let n = self.resolution;
        let m = resolution;
        let src = self.values.data();
        let taps: Vec<(usize, usize, f64)> = (0..m)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * n as f64 / m as f64 - 0.5)
                    .clamp(0.0, (n - 1) as f64);
                let lo = pos.floor() as usize;
                (lo, (lo + 1).min(n - 1), pos - lo as f64)
            })
            .collect();
        let mut out = vec![0.0; m * m * m];
        for x in 0..m {
            let (x0, x1, wx) = taps[x];
            for y in 0..m {
                let (y0, y1, wy) = taps[y];
                for z in 0..m {
                    let (z0, z1, wz) = taps[z];
                    let at = |ix: usize, iy: usize, iz: usize| src[(ix * n + iy) * n + iz];
                    let c00 = at(x0, y0, z0) * (1.0 - wz) + at(x0, y0, z1) * wz;
                    let c01 = at(x0, y1, z0) * (1.0 - wz) + at(x0, y1, z1) * wz;
                    let c10 = at(x1, y0, z0) * (1.0 - wz) + at(x1, y0, z1) * wz;
                    let c11 = at(x1, y1, z0) * (1.0 - wz) + at(x1, y1, z1) * wz;
                    let c0 = c00 * (1.0 - wy) + c01 * wy;
                    let c1 = c10 * (1.0 - wy) + c11 * wy;
                    out[(x * m + y) * m + z] = c0 * (1.0 - wx) + c1 * wx;
                }
            }
        }
        VoxelGrid::new(Tensor::from_vec(vec![m, m, m], out), false)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowConfig {
    pub num_coupling_blocks: usize,
    pub hidden_width: usize,
    pub latent_dim: usize,
    pub condition_dim: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            num_coupling_blocks: 5,
            hidden_width: 1024,
            latent_dim: DEFAULT_LATENT_DIM,
            condition_dim: 64,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_coupling_blocks == 0 {
            return Err(ZfError::Config("flow needs at least one coupling block".into()));
        }
        if self.latent_dim < 2 {
            return Err(ZfError::Config("latent_dim must be at least 2".into()));
        }
        if self.hidden_width == 0 || self.condition_dim == 0 {
            return Err(ZfError::Config("flow widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub num_blocks: usize,
    pub resolution: usize,
    /// Channel width entering the first block; halves per block, floor 4.
    pub base_channels: usize,
    pub zeroconv_enabled: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_blocks: 5,
            resolution: 128,
            base_channels: 32,
            zeroconv_enabled: false,
        }
    }
}

impl DecoderConfig {
    /// Side length of the seed volume the latent is projected onto.
    pub fn base_resolution(&self) -> Result<usize> {
        let factor = 1usize
            .checked_shl(self.num_blocks as u32)
            .ok_or_else(|| ZfError::Config("too many decoder blocks".into()))?;
        if self.resolution == 0 || self.resolution % factor != 0 {
            return Err(ZfError::Config(format!(
                "resolution {} is not a power-of-two multiple of the decoder's upsampling factor {factor}",
                self.resolution
            )));
        }
        Ok(self.resolution / factor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(ZfError::Config("decoder needs at least one block".into()));
        }
        if self.base_channels == 0 {
            return Err(ZfError::Config("base_channels must be positive".into()));
        }
        self.base_resolution()?;
        Ok(())
    }
}

/// How `sample_latent` seeds the base-space point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Base point 0 pushed through the inverse flow; deterministic.
    Zero,
    /// Base point drawn from N(0, I) with the given seed.
    Gaussian,
}

/// Latent flow + occupancy decoder with a shared parameter store.
pub struct Generator {
    pub flow_cfg: FlowConfig,
    pub decoder_cfg: DecoderConfig,
    pub params: ParamStore,
    adapted: bool,
}

impl Generator {
    /// Random initialization. The flow's final coupling layers start at
    /// zero, so the freshly built flow is exactly the identity map.
    pub fn new(flow_cfg: FlowConfig, decoder_cfg: DecoderConfig, seed: u64) -> Result<Self> {
        flow_cfg.validate()?;
        decoder_cfg.validate()?;
        let mut params = ParamStore::new();
        flow::init_params(&mut params, &flow_cfg, seed);
        decoder::init_params(&mut params, &decoder_cfg, &flow_cfg, seed)?;
        Ok(Generator {
            flow_cfg,
            decoder_cfg,
            params,
            adapted: false,
        })
    }

    /// Rebuild from a parameter store (checkpoint load path).
    pub(crate) fn from_parts(
        flow_cfg: FlowConfig,
        decoder_cfg: DecoderConfig,
        params: ParamStore,
        adapted: bool,
    ) -> Result<Self> {
        flow_cfg.validate()?;
        decoder_cfg.validate()?;
        Ok(Generator {
            flow_cfg,
            decoder_cfg,
            params,
            adapted,
        })
    }

    pub fn is_adapted(&self) -> bool {
        self.adapted
    }

    /// Parameter paths the decoder's frozen side owns after adaptation.
    pub fn is_frozen_decoder_param(name: &str) -> bool {
        name.starts_with("decoder.")
            && !name.contains(TUNED_INFIX)
            && !name.contains(ZEROCONV_INFIX)
    }

    /// Replace every decoder block with frozen-copy(x) + ZeroConv(trainable-copy(x)).
    ///
    /// The trainable copy starts as an exact clone and the ZeroConv kernels
    /// start at zero, so the adapted decoder equals the frozen one on every
    /// input until training moves it.
    pub fn wrap_zeroconv(&mut self) -> Result<()> {
        if self.adapted {
            return Err(ZfError::Contract(
                "decoder is already zeroconv-wrapped; wrapping is not idempotent".into(),
            ));
        }
        decoder::wrap_zeroconv(&mut self.params, &self.decoder_cfg, &self.flow_cfg)?;
        self.adapted = true;
        self.decoder_cfg.zeroconv_enabled = true;
        Ok(())
    }

    fn check_cond(&self, cond: &EmbeddingBatch) -> Result<()> {
        if cond.width() != self.flow_cfg.condition_dim {
            return Err(ZfError::Shape(format!(
                "condition width {} does not match flow condition_dim {}",
                cond.width(),
                self.flow_cfg.condition_dim
            )));
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Graph-level forwards (used by the trainer; gradients flow through).
    // ------------------------------------------------------------------

    /// Latent -> base space. Returns (u, per-item logdet).
    pub fn flow_forward_vars(
        &self,
        graph: &mut Graph,
        gp: &GraphParams,
        z: VarId,
        cond: VarId,
    ) -> (VarId, VarId) {
        flow::forward(graph, gp, &self.flow_cfg, z, cond)
    }

    /// Base space -> latent.
    pub fn flow_inverse_vars(
        &self,
        graph: &mut Graph,
        gp: &GraphParams,
        u: VarId,
        cond: VarId,
    ) -> VarId {
        flow::inverse(graph, gp, &self.flow_cfg, u, cond)
    }

    /// Latent batch [B,d] -> occupancy batch [B,N,N,N], values in (0,1).
    pub fn decode_vars(&self, graph: &mut Graph, gp: &GraphParams, z: VarId) -> VarId {
        decoder::forward(graph, gp, &self.decoder_cfg, self.adapted, z)
    }

    // ------------------------------------------------------------------
    // Plain (non-graph) operation surface.
    // ------------------------------------------------------------------

    pub fn flow_forward(
        &self,
        z: &LatentBatch,
        cond: &EmbeddingBatch,
    ) -> Result<(LatentBatch, Vec<f64>)> {
        self.check_cond(cond)?;
        if z.len() != cond.len() {
            return Err(ZfError::Shape(format!(
                "latent batch ({}) and condition batch ({}) sizes differ",
                z.len(),
                cond.len()
            )));
        }
        if z.dim() != self.flow_cfg.latent_dim {
            return Err(ZfError::Shape(format!(
                "latent dim {} does not match flow latent_dim {}",
                z.dim(),
                self.flow_cfg.latent_dim
            )));
        }
        let mut graph = Graph::new();
        let gp = GraphParams::bind_frozen(&mut graph, &self.params);
        let zv = graph.constant(z.tensor().clone());
        let cv = graph.constant(cond.vectors().clone());
        let (u, logdet) = self.flow_forward_vars(&mut graph, &gp, zv, cv);
        Ok((
            LatentBatch::from_tensor(graph.value(u).clone())?,
            graph.value(logdet).data().to_vec(),
        ))
    }

    pub fn flow_inverse(&self, u: &LatentBatch, cond: &EmbeddingBatch) -> Result<LatentBatch> {
        self.check_cond(cond)?;
        if u.len() != cond.len() {
            return Err(ZfError::Shape(format!(
                "base batch ({}) and condition batch ({}) sizes differ",
                u.len(),
                cond.len()
            )));
        }
        let mut graph = Graph::new();
        let gp = GraphParams::bind_frozen(&mut graph, &self.params);
        let uv = graph.constant(u.tensor().clone());
        let cv = graph.constant(cond.vectors().clone());
        let z = self.flow_inverse_vars(&mut graph, &gp, uv, cv);
        LatentBatch::from_tensor(graph.value(z).clone())
    }

    /// Sample one latent code per condition row.
    pub fn sample_latent(
        &self,
        text_emb: &EmbeddingBatch,
        noise_mode: NoiseMode,
        seed: u64,
    ) -> Result<LatentBatch> {
        self.check_cond(text_emb)?;
        let b = text_emb.len();
        let d = self.flow_cfg.latent_dim;
        let base = match noise_mode {
            NoiseMode::Zero => Tensor::zeros(vec![b, d]),
            NoiseMode::Gaussian => {
                let mut rng = Rng::stream(seed, "latent-noise", 0);
                Tensor::randn(vec![b, d], 1.0, &mut rng)
            }
        };
        self.flow_inverse(&LatentBatch::from_tensor(base)?, text_emb)
    }

    /// Decode each latent code to a real-valued occupancy grid.
    pub fn decode_occupancy(&self, z: &LatentBatch) -> Result<Vec<VoxelGrid>> {
        if z.dim() != self.flow_cfg.latent_dim {
            return Err(ZfError::Shape(format!(
                "latent dim {} does not match flow latent_dim {}",
                z.dim(),
                self.flow_cfg.latent_dim
            )));
        }
        let mut graph = Graph::new();
        let gp = GraphParams::bind_frozen(&mut graph, &self.params);
        let zv = graph.constant(z.tensor().clone());
        let out = self.decode_vars(&mut graph, &gp, zv);
        let n = self.decoder_cfg.resolution;
        let batch = graph.value(out);
        (0..z.len())
            .map(|i| {
                let vol = n * n * n;
                VoxelGrid::new(
                    Tensor::from_vec(vec![n, n, n], batch.data()[i * vol..(i + 1) * vol].to_vec()),
                    false,
                )
            })
            .collect()
    }
}
