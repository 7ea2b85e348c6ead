//! Deterministic toy encoder for hardware-free tests.
//!
//! Text path: the prompt's UTF-8 bytes are scanned as overlapping 3-byte
//! windows (a prompt shorter than 3 bytes contributes its whole byte string
//! as one window); each window is FNV-1a hashed into one of 64 bins to form
//! a trigram count vector, which is multiplied by a fixed seeded H x 64
//! projection and L2-normalized.
//!
//! Image path: channel-mean to grayscale, average-pool to 8 x 8, flatten to
//! 64 values, multiply by a second fixed seeded H x 64 projection, and
//! L2-normalize. This path is differentiable w.r.t. pixels; the projections
//! are constants, so no gradient ever reaches encoder parameters.

use crate::encoders::{
    validate_image_shape, EmbeddingBatch, EncoderKind, EncoderSpec, VlmEncoder, CONTEXT_LIMIT,
};
use crate::error::{Result, ZfError};
use crate::graph::{Graph, VarId};
use crate::rng::{fnv1a, Rng};
use crate::tensor::Tensor;

pub const TRIGRAM_BINS: usize = 64;
const POOLED_SIDE: usize = 8;

pub struct ToyEncoder {
    spec: EncoderSpec,
    /// [TRIGRAM_BINS, H], applied as counts . P
    text_proj: Tensor,
    /// [POOLED_SIDE^2, H]
    image_proj: Tensor,
}

impl ToyEncoder {
    pub fn new(seed: u64, embedding_width: usize, image_resolution: usize) -> Result<Self> {
        let spec = EncoderSpec {
            kind: EncoderKind::Toy,
            embedding_width,
            image_resolution,
        };
        spec.validate()?;
        if image_resolution % POOLED_SIDE != 0 {
            return Err(ZfError::Parameter(format!(
                "toy encoder image_resolution must be a multiple of {POOLED_SIDE}, got {image_resolution}"
            )));
        }
        let mut text_rng = Rng::stream(seed, "toy-encoder/text-proj", 0);
        let mut image_rng = Rng::stream(seed, "toy-encoder/image-proj", 0);
        Ok(ToyEncoder {
            spec,
            text_proj: Tensor::randn(vec![TRIGRAM_BINS, embedding_width], 1.0, &mut text_rng),
            image_proj: Tensor::randn(
                vec![POOLED_SIDE * POOLED_SIDE, embedding_width],
                1.0,
                &mut image_rng,
            ),
        })
    }

    /// Trigram count vector of a prompt; the documented text featurization.
    pub fn trigram_counts(prompt: &str) -> [f64; TRIGRAM_BINS] {
        let mut counts = [0.0; TRIGRAM_BINS];
        let bytes = prompt.as_bytes();
        if bytes.len() < 3 {
            counts[(fnv1a(bytes) % TRIGRAM_BINS as u64) as usize] += 1.0;
        } else {
            for window in bytes.windows(3) {
                counts[(fnv1a(window) % TRIGRAM_BINS as u64) as usize] += 1.0;
            }
        }
        counts
    }

    fn check_prompt(&self, prompt: &str) -> Result<()> {
        if prompt.is_empty() {
            return Err(ZfError::Parameter("prompt must be non-empty".into()));
        }
        let tokens = prompt.split_whitespace().count();
        if tokens > CONTEXT_LIMIT {
            return Err(ZfError::ContextOverflow {
                prompt: prompt.to_string(),
                limit: CONTEXT_LIMIT,
            });
        }
        Ok(())
    }
}

impl VlmEncoder for ToyEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode_text(&self, prompts: &[String]) -> Result<EmbeddingBatch> {
        if prompts.is_empty() {
            return Err(ZfError::Parameter("prompt list must be non-empty".into()));
        }
        let h = self.spec.embedding_width;
        let mut rows = vec![0.0; prompts.len() * h];
        for (i, prompt) in prompts.iter().enumerate() {
            self.check_prompt(prompt)?;
            let counts = Self::trigram_counts(prompt);
            let row = &mut rows[i * h..(i + 1) * h];
            for (bin, &c) in counts.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot += c * self.text_proj.data()[bin * h + j];
                }
            }
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(ZfError::Contract(format!(
                    "degenerate text embedding for prompt {prompt:?}"
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        EmbeddingBatch::normalized(Tensor::from_vec(vec![prompts.len(), h], rows))
    }

    fn encode_image_vars(&self, graph: &mut Graph, images: VarId) -> Result<VarId> {
        validate_image_shape(graph.value(images).shape(), self.spec.image_resolution)?;
        let b = graph.value(images).shape()[0];
        let gray = graph.channel_mean(images);
        let pooled = graph.avgpool2d_to(gray, POOLED_SIDE, POOLED_SIDE);
        let flat = graph.reshape(pooled, vec![b, POOLED_SIDE * POOLED_SIDE]);
        let proj = graph.constant(self.image_proj.clone());
        let emb = graph.matmul(flat, proj);
        Ok(graph.l2_normalize_rows(emb))
    }

    fn param_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&self.text_proj.checksum().to_le_bytes());
        bytes.extend_from_slice(&self.image_proj.checksum().to_le_bytes());
        fnv1a(&bytes)
    }
}
