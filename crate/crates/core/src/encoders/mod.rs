//! Frozen vision-language encoder pair behind a single interface.
//!
//! Two adapters: a CLIP-style dual-tower transformer loaded from a
//! checkpoint ([`clip::ClipEncoder`]), and a deterministic toy encoder for
//! hardware-free tests ([`toy::ToyEncoder`]). Both embed text and images
//! into one shared space with unit-norm rows; the image path is
//! differentiable w.r.t. pixels, the encoder parameters never receive
//! gradients.

pub mod clip;
pub mod toy;

pub use clip::ClipEncoder;
pub use toy::ToyEncoder;

use crate::error::{Result, ZfError};
use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;

/// Token budget shared by both adapters (the CLIP context length).
pub const CONTEXT_LIMIT: usize = 77;

/// Tolerance on the unit-norm invariant of embedding rows.
pub const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    RealVlm,
    Toy,
}

#[derive(Debug, Clone)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub embedding_width: usize,
    pub image_resolution: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_width == 0 {
            return Err(ZfError::Parameter("embedding_width must be positive".into()));
        }
        if self.image_resolution == 0 {
            return Err(ZfError::Parameter("image_resolution must be positive".into()));
        }
        if self.kind == EncoderKind::RealVlm && self.image_resolution != 224 {
            return Err(ZfError::Parameter(format!(
                "the real adapter consumes 224x224 images, got {}",
                self.image_resolution
            )));
        }
        Ok(())
    }
}

/// Batch of embeddings, one row per item.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    vectors: Tensor,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Wrap a [B,H] matrix whose rows are already unit-norm.
    pub fn normalized(vectors: Tensor) -> Result<Self> {
        let batch = EmbeddingBatch::raw(vectors)?;
        let batch = EmbeddingBatch {
            vectors: batch.vectors,
            normalized: true,
        };
        batch.check_norms()?;
        Ok(batch)
    }

    /// Wrap a [B,H] matrix without the unit-norm claim.
    pub fn raw(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(ZfError::Shape(format!(
                "embeddings must be [B,H], got {:?}",
                vectors.shape()
            )));
        }
        if vectors.shape()[0] == 0 {
            return Err(ZfError::Shape("embedding batch must have B >= 1".into()));
        }
        Ok(EmbeddingBatch {
            vectors,
            normalized: false,
        })
    }

    fn check_norms(&self) -> Result<()> {
        let (b, h) = (self.len(), self.width());
        for i in 0..b {
            let norm: f64 = self.vectors.data()[i * h..(i + 1) * h]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(ZfError::Contract(format!(
                    "embedding row {i} has norm {norm}, expected 1 +/- {NORM_TOL}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let h = self.width();
        &self.vectors.data()[i * h..(i + 1) * h]
    }

    pub fn dot(&self, i: usize, other: &EmbeddingBatch, j: usize) -> f64 {
        self.row(i)
            .iter()
            .zip(other.row(j))
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Cosine similarity; equals the dot product on normalized batches.
    pub fn cosine(&self, i: usize, other: &EmbeddingBatch, j: usize) -> f64 {
        let na: f64 = self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = other.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.dot(i, other, j) / (na * nb)
    }
}

/// Frozen text/image encoder pair sharing one embedding space.
///
/// Implementations are immutable after construction; concurrent encode
/// calls are safe. Batching is the caller's responsibility.
pub trait VlmEncoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Embed prompts; one unit-norm row per prompt, deterministic.
    fn encode_text(&self, prompts: &[String]) -> Result<EmbeddingBatch>;

    /// Embed images [B,3,R,R] inside an existing graph so gradients reach
    /// the pixels. Returns a [B,H] var with unit-norm rows.
    fn encode_image_vars(&self, graph: &mut Graph, images: VarId) -> Result<VarId>;

    /// Non-graph convenience wrapper around [`Self::encode_image_vars`].
    fn encode_image(&self, images: &Tensor) -> Result<EmbeddingBatch> {
        let mut graph = Graph::new();
        let imgs = graph.constant(images.clone());
        let out = self.encode_image_vars(&mut graph, imgs)?;
        EmbeddingBatch::normalized(graph.value(out).clone())
    }

    /// Checksum of all encoder parameters; must be invariant under any
    /// amount of training.
    fn param_checksum(&self) -> u64;

    fn context_limit(&self) -> usize {
        CONTEXT_LIMIT
    }
}

/// Shared validation for image batches entering either adapter.
pub(crate) fn validate_image_shape(shape: &[usize], resolution: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(ZfError::Shape(format!(
            "images must be [B,3,R,R], got {shape:?}"
        )));
    }
    if shape[2] != resolution {
        return Err(ZfError::Shape(format!(
            "image resolution {} does not match the encoder's expected {resolution}",
            shape[2]
        )));
    }
    Ok(())
}
