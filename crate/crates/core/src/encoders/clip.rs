//! Real vision-language adapter: a frozen CLIP-style dual-tower
//! transformer loaded from a parameter archive.
//!
//! Checkpoint contents: a [`ClipMeta`] metadata record (architecture
//! dimensions plus the tokenizer's vocabulary and merge table) and one
//! dense f64 array per parameter. Linear weights are stored input-major
//! ([in, out], applied as x . W); converters from published weights must
//! transpose accordingly. The adapter exposes only the two encode
//! operations; there is no fine-tuning path, and encoder parameters never
//! receive gradients.
//!
//! Text tower: byte-pair encoding over the archive's own vocab/merges
//! (lowercased, whitespace-split, `</w>` end-of-word convention), token +
//! positional embeddings, pre-LN transformer blocks with causal
//! attention, final layer norm, projection of the end-of-text position.
//! Image tower: non-overlapping patch embedding, class token, positional
//! embeddings, pre-LN transformer blocks, final layer norm of the class
//! token, projection. Both towers L2-normalize their outputs into one
//! shared space.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, validate_params, write_archive};
use crate::encoders::{validate_image_shape, EmbeddingBatch, EncoderKind, EncoderSpec, VlmEncoder};
use crate::error::{Result, ZfError};
use crate::graph::{Graph, VarId};
use crate::params::ParamStore;
use crate::tensor::{stable_sigmoid, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipMeta {
    pub embed_dim: usize,
    pub image_resolution: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub patch_size: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub vocab: Vec<String>,
    pub merges: Vec<(String, String)>,
    pub sot_token: String,
    pub eot_token: String,
}

impl ClipMeta {
    fn validate(&self) -> Result<()> {
        if self.vocab.len() != self.vocab_size {
            return Err(ZfError::Config(format!(
                "vocab has {} entries but vocab_size is {}",
                self.vocab.len(),
                self.vocab_size
            )));
        }
        if self.text_width % self.text_heads != 0 || self.vision_width % self.vision_heads != 0 {
            return Err(ZfError::Config("width must divide evenly into heads".into()));
        }
        if self.image_resolution % self.patch_size != 0 {
            return Err(ZfError::Config("patch size must divide the image resolution".into()));
        }
        if self.context_length < 3 {
            return Err(ZfError::Config("context_length must fit SOT + token + EOT".into()));
        }
        for tok in [&self.sot_token, &self.eot_token] {
            if !self.vocab.contains(tok) {
                return Err(ZfError::Config(format!("special token {tok:?} missing from vocab")));
            }
        }
        Ok(())
    }

    fn vision_tokens(&self) -> usize {
        let side = self.image_resolution / self.patch_size;
        side * side + 1
    }
}

/// Expected parameter paths and shapes for a given architecture.
fn expected_params(meta: &ClipMeta) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let (tw, vw, e) = (meta.text_width, meta.vision_width, meta.embed_dim);
    out.push(("text.token_embedding".into(), vec![meta.vocab_size, tw]));
    out.push(("text.positional".into(), vec![meta.context_length, tw]));
    for i in 0..meta.text_layers {
        push_block(&mut out, &format!("text.block{i}"), tw);
    }
    out.push(("text.ln_final.gamma".into(), vec![tw]));
    out.push(("text.ln_final.beta".into(), vec![tw]));
    out.push(("text.projection".into(), vec![tw, e]));

    let p = meta.patch_size;
    out.push(("vision.patch_embedding".into(), vec![3 * p * p, vw]));
    out.push(("vision.class_token".into(), vec![vw]));
    out.push(("vision.positional".into(), vec![meta.vision_tokens(), vw]));
    out.push(("vision.ln_pre.gamma".into(), vec![vw]));
    out.push(("vision.ln_pre.beta".into(), vec![vw]));
    for i in 0..meta.vision_layers {
        push_block(&mut out, &format!("vision.block{i}"), vw);
    }
    out.push(("vision.ln_post.gamma".into(), vec![vw]));
    out.push(("vision.ln_post.beta".into(), vec![vw]));
    out.push(("vision.projection".into(), vec![vw, e]));
    out
}

fn push_block(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, w: usize) {
    for ln in ["ln1", "ln2"] {
        out.push((format!("{prefix}.{ln}.gamma"), vec![w]));
        out.push((format!("{prefix}.{ln}.beta"), vec![w]));
    }
    for proj in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.attn.{proj}.weight"), vec![w, w]));
        out.push((format!("{prefix}.attn.{proj}.bias"), vec![w]));
    }
    out.push((format!("{prefix}.mlp.fc1.weight"), vec![w, 4 * w]));
    out.push((format!("{prefix}.mlp.fc1.bias"), vec![4 * w]));
    out.push((format!("{prefix}.mlp.fc2.weight"), vec![4 * w, w]));
    out.push((format!("{prefix}.mlp.fc2.bias"), vec![w]));
}

pub struct ClipEncoder {
    spec: EncoderSpec,
    meta: ClipMeta,
    params: ParamStore,
    vocab_index: BTreeMap<String, usize>,
    merge_ranks: BTreeMap<(String, String), usize>,
}

impl ClipEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (ClipMeta, ParamStore) = read_archive(path)?;
        meta.validate()?;
        validate_params(&expected_params(&meta), &params)?;
        let spec = EncoderSpec {
            kind: EncoderKind::RealVlm,
            embedding_width: meta.embed_dim,
            image_resolution: meta.image_resolution,
        };
        spec.validate()?;
        let vocab_index = meta
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let merge_ranks = meta
            .merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        Ok(ClipEncoder {
            spec,
            meta,
            params,
            vocab_index,
            merge_ranks,
        })
    }

    fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing validated parameter {name}"))
    }

    /// Byte-pair encode one whitespace-delimited word using the archive's
    /// merge table and `</w>` end-of-word marker.
    fn bpe_word(&self, word: &str) -> Result<Vec<usize>> {
        let chars: Vec<char> = word.chars().collect();
        let mut symbols: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = symbols.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, index)
            for i in 0..symbols.len().saturating_sub(1) {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.merge_ranks.get(&key) {
                    if best.map(|(r, _)| rank < r).unwrap_or(true) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols.splice(i..i + 2, [merged]);
        }
        symbols
            .iter()
            .map(|s| {
                self.vocab_index.get(s).copied().ok_or_else(|| {
                    ZfError::Config(format!(
                        "token {s:?} is not in the checkpoint's vocabulary"
                    ))
                })
            })
            .collect()
    }

    /// Tokenize a prompt to [SOT, ..., EOT]; errors if it exceeds the
    /// context length.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        if prompt.trim().is_empty() {
            return Err(ZfError::Parameter("prompt must be non-empty".into()));
        }
        let sot = self.vocab_index[&self.meta.sot_token];
        let eot = self.vocab_index[&self.meta.eot_token];
        let mut ids = vec![sot];
        for word in prompt.to_lowercase().split_whitespace() {
            ids.extend(self.bpe_word(word)?);
        }
        ids.push(eot);
        if ids.len() > self.meta.context_length {
            return Err(ZfError::ContextOverflow {
                prompt: prompt.to_string(),
                limit: self.meta.context_length,
            });
        }
        Ok(ids)
    }

    // -- frozen text tower, host math --------------------------------------

    fn host_layernorm(&self, x: &mut [f64], t: usize, d: usize, prefix: &str) {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        for row in 0..t {
            let r = &mut x[row * d..(row + 1) * d];
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + 1e-5).sqrt();
            for j in 0..d {
                r[j] = gamma.data()[j] * (r[j] - mean) * istd + beta.data()[j];
            }
        }
    }

    fn host_linear(&self, x: &[f64], t: usize, d_in: usize, name: &str) -> Vec<f64> {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        let d_out = w.shape()[1];
        assert_eq!(w.shape()[0], d_in);
        let mut out = vec![0.0; t * d_out];
        for row in 0..t {
            let o = &mut out[row * d_out..(row + 1) * d_out];
            o.copy_from_slice(&b.data()[..d_out]);
            for kk in 0..d_in {
                let xv = x[row * d_in + kk];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w.data()[kk * d_out..(kk + 1) * d_out];
                for (oj, wj) in o.iter_mut().zip(wrow) {
                    *oj += xv * wj;
                }
            }
        }
        out
    }

    /// Causal multi-head attention over a [t, w] sequence.
    fn host_attention(&self, x: &[f64], t: usize, prefix: &str) -> Vec<f64> {
        let w = self.meta.text_width;
        let heads = self.meta.text_heads;
        let hd = w / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let q = self.host_linear(x, t, w, &format!("{prefix}.wq"));
        let k = self.host_linear(x, t, w, &format!("{prefix}.wk"));
        let v = self.host_linear(x, t, w, &format!("{prefix}.wv"));
        let mut ctx = vec![0.0; t * w];
        for h in 0..heads {
            for i in 0..t {
                // Causal: token i attends to 0..=i.
                let mut logits = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += q[i * w + h * hd + c] * k[j * w + h * hd + c];
                    }
                    logits.push(dot * scale);
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - m).exp();
                    sum += *l;
                }
                for (j, l) in logits.iter().enumerate() {
                    let a = l / sum;
                    for c in 0..hd {
                        ctx[i * w + h * hd + c] += a * v[j * w + h * hd + c];
                    }
                }
            }
        }
        self.host_linear(&ctx, t, w, &format!("{prefix}.wo"))
    }

    fn text_features(&self, prompt: &str) -> Result<Vec<f64>> {
        let ids = self.tokenize(prompt)?;
        let t = ids.len();
        let w = self.meta.text_width;
        let tok = self.param("text.token_embedding");
        let pos = self.param("text.positional");
        let mut x = vec![0.0; t * w];
        for (row, &id) in ids.iter().enumerate() {
            for j in 0..w {
                x[row * w + j] = tok.data()[id * w + j] + pos.data()[row * w + j];
            }
        }
        for block in 0..self.meta.text_layers {
            let prefix = format!("text.block{block}");
            let mut attn_in = x.clone();
            self.host_layernorm(&mut attn_in, t, w, &format!("{prefix}.ln1"));
            let attn_out = self.host_attention(&attn_in, t, &format!("{prefix}.attn"));
            for (xi, ai) in x.iter_mut().zip(&attn_out) {
                *xi += ai;
            }
            let mut mlp_in = x.clone();
            self.host_layernorm(&mut mlp_in, t, w, &format!("{prefix}.ln2"));
            let mut hidden = self.host_linear(&mlp_in, t, w, &format!("{prefix}.mlp.fc1"));
            for v in hidden.iter_mut() {
                *v *= stable_sigmoid(1.702 * *v);
            }
            let mlp_out = self.host_linear(&hidden, t, 4 * w, &format!("{prefix}.mlp.fc2"));
            for (xi, mi) in x.iter_mut().zip(&mlp_out) {
                *xi += mi;
            }
        }
        self.host_layernorm(&mut x, t, w, "text.ln_final");
        // Features at the end-of-text position, projected to the shared space.
        let eot_row = &x[(t - 1) * w..t * w];
        let proj = self.param("text.projection");
        let e = self.meta.embed_dim;
        let mut out = vec![0.0; e];
        for kk in 0..w {
            let xv = eot_row[kk];
            for (j, slot) in out.iter_mut().enumerate() {
                *slot += xv * proj.data()[kk * e + j];
            }
        }
        let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(ZfError::Contract(format!(
                "degenerate text embedding for prompt {prompt:?}"
            )));
        }
        for v in out.iter_mut() {
            *v /= norm;
        }
        Ok(out)
    }

    // -- image tower on the graph ------------------------------------------

    fn graph_linear(&self, g: &mut Graph, x: VarId, rows: usize, name: &str) -> VarId {
        let w = g.constant(self.param(&format!("{name}.weight")).clone());
        let b = g.constant(self.param(&format!("{name}.bias")).clone());
        let d_in = g.value(x).numel() / rows;
        let flat = g.reshape(x, vec![rows, d_in]);
        let y = g.matmul(flat, w);
        g.add_row(y, b)
    }

    fn graph_layernorm(&self, g: &mut Graph, x: VarId, prefix: &str) -> VarId {
        let gamma = g.constant(self.param(&format!("{prefix}.gamma")).clone());
        let beta = g.constant(self.param(&format!("{prefix}.beta")).clone());
        g.layernorm(x, gamma, beta, 1e-5)
    }

    /// Bidirectional multi-head attention over [B,T,W].
    fn graph_attention(&self, g: &mut Graph, x: VarId, prefix: &str) -> VarId {
        let shape = g.value(x).shape().to_vec();
        let (b, t, w) = (shape[0], shape[1], shape[2]);
        let heads = self.meta.vision_heads;
        let hd = w / heads;
        let to_heads = |g: &mut Graph, v: VarId| -> VarId {
            let v = g.reshape(v, vec![b, t, heads, hd]);
            let v = g.permute(v, &[0, 2, 1, 3]);
            g.reshape(v, vec![b * heads, t, hd])
        };
        let q = self.graph_linear(g, x, b * t, &format!("{prefix}.wq"));
        let k = self.graph_linear(g, x, b * t, &format!("{prefix}.wk"));
        let v = self.graph_linear(g, x, b * t, &format!("{prefix}.wv"));
        let q = {
            let q3 = g.reshape(q, vec![b, t, w]);
            to_heads(g, q3)
        };
        let k = {
            let k3 = g.reshape(k, vec![b, t, w]);
            to_heads(g, k3)
        };
        let v = {
            let v3 = g.reshape(v, vec![b, t, w]);
            to_heads(g, v3)
        };
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt);
        let scaled = g.affine(scores, 1.0 / (hd as f64).sqrt(), 0.0);
        let attn = g.softmax_lastdim(scaled);
        let ctx = g.bmm(attn, v);
        let ctx = g.reshape(ctx, vec![b, heads, t, hd]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let merged = g.reshape(ctx, vec![b, t, w]);
        let out = self.graph_linear(g, merged, b * t, &format!("{prefix}.wo"));
        g.reshape(out, vec![b, t, w])
    }
}

impl VlmEncoder for ClipEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode_text(&self, prompts: &[String]) -> Result<EmbeddingBatch> {
        if prompts.is_empty() {
            return Err(ZfError::Parameter("prompt list must be non-empty".into()));
        }
        let e = self.meta.embed_dim;
        let mut rows = Vec::with_capacity(prompts.len() * e);
        for p in prompts {
            rows.extend(self.text_features(p)?);
        }
        EmbeddingBatch::normalized(Tensor::from_vec(vec![prompts.len(), e], rows))
    }

    fn encode_image_vars(&self, g: &mut Graph, images: VarId) -> Result<VarId> {
        validate_image_shape(g.value(images).shape(), self.spec.image_resolution)?;
        let b = g.value(images).shape()[0];
        let w = self.meta.vision_width;
        let patches = g.patchify(images, self.meta.patch_size);
        let t_patches = g.value(patches).shape()[1];
        let pe = g.constant(self.param("vision.patch_embedding").clone());
        let flat = g.reshape(
            patches,
            vec![b * t_patches, 3 * self.meta.patch_size * self.meta.patch_size],
        );
        let embedded = g.matmul(flat, pe);
        let tokens = g.reshape(embedded, vec![b, t_patches, w]);
        let cls = g.constant(self.param("vision.class_token").clone());
        let with_cls = g.prepend_row(tokens, cls);
        let pos = g.constant(self.param("vision.positional").clone());
        let mut x = g.add_broadcast_tail(with_cls, pos);
        let t = t_patches + 1;

        x = self.graph_layernorm(g, x, "vision.ln_pre");
        for block in 0..self.meta.vision_layers {
            let prefix = format!("vision.block{block}");
            let ln1 = self.graph_layernorm(g, x, &format!("{prefix}.ln1"));
            let attn = self.graph_attention(g, ln1, &format!("{prefix}.attn"));
            x = g.add(x, attn);
            let ln2 = self.graph_layernorm(g, x, &format!("{prefix}.ln2"));
            let h = self.graph_linear(g, ln2, b * t, &format!("{prefix}.mlp.fc1"));
            let h = g.quick_gelu(h);
            let h = self.graph_linear(g, h, b * t, &format!("{prefix}.mlp.fc2"));
            let h = g.reshape(h, vec![b, t, w]);
            x = g.add(x, h);
        }
        let cls_out = g.take_token(x, 0);
        let normed = self.graph_layernorm(g, cls_out, "vision.ln_post");
        let proj = g.constant(self.param("vision.projection").clone());
        let emb = g.matmul(normed, proj);
        Ok(g.l2_normalize_rows(emb))
    }

    fn param_checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn context_limit(&self) -> usize {
        self.meta.context_length
    }
}

/// Build a tiny randomly initialized checkpoint with a minimal vocabulary.
/// Exists so the adapter can be exercised without real published weights.
#[doc(hidden)]
pub fn write_synthetic_checkpoint(path: &Path, seed: u64) -> Result<ClipMeta> {
    use crate::rng::Rng;
    let mut vocab: Vec<String> = vec![
        "<|startoftext|>".to_string(),
        "<|endoftext|>".to_string(),
    ];
    for c in 'a'..='z' {
        vocab.push(c.to_string());
    }
    for c in 'a'..='z' {
        vocab.push(format!("{c}</w>"));
    }
    vocab.push("ab</w>".to_string());
    vocab.push("on</w>".to_string());
    let meta = ClipMeta {
        embed_dim: 8,
        image_resolution: 224,
        vision_width: 16,
        vision_layers: 2,
        vision_heads: 2,
        patch_size: 32,
        text_width: 12,
        text_layers: 2,
        text_heads: 2,
        vocab_size: vocab.len(),
        context_length: 77,
        vocab,
        merges: vec![
            ("a".to_string(), "b</w>".to_string()),
            ("o".to_string(), "n</w>".to_string()),
        ],
        sot_token: "<|startoftext|>".to_string(),
        eot_token: "<|endoftext|>".to_string(),
    };
    let mut params = ParamStore::new();
    let mut rng = Rng::stream(seed, "synthetic-clip", 0);
    for (name, shape) in expected_params(&meta) {
        let fan_in = shape[0].max(1) as f64;
        let std = if name.ends_with(".bias") || name.ends_with(".beta") {
            0.0
        } else if name.ends_with(".gamma") {
            0.05
        } else {
            (1.0 / fan_in).sqrt()
        };
        let mut t = Tensor::randn(shape.clone(), std, &mut rng);
        if name.ends_with(".gamma") {
            // Layer norm gains near 1.
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        params.insert(name, t);
    }
    write_archive(path, &meta, &params)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn load_synthetic() -> (tempfile::TempDir, ClipEncoder) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.zfckpt");
        write_synthetic_checkpoint(&path, 1).unwrap();
        let enc = ClipEncoder::load(&path).unwrap();
        (dir, enc)
    }

    #[test]
    fn tokenizer_applies_merges_and_overflows() {
        let (_dir, enc) = load_synthetic();
        // "ab" merges to one token: [SOT, ab</w>, EOT]
        let ids = enc.tokenize("ab").unwrap();
        assert_eq!(ids.len(), 3);
        // "ba" does not merge: [SOT, b, a</w>, EOT]
        let ids = enc.tokenize("ba").unwrap();
        assert_eq!(ids.len(), 4);
        // Case folding.
        assert_eq!(enc.tokenize("AB").unwrap(), enc.tokenize("ab").unwrap());

        // 77-token context: 75 single-letter words fit, 76 do not.
        let fits = vec!["a"; 75].join(" ");
        assert!(enc.tokenize(&fits).is_ok());
        let overflow = vec!["a"; 76].join(" ");
        match enc.encode_text(&[overflow.clone()]) {
            Err(ZfError::ContextOverflow { prompt, limit }) => {
                assert_eq!(prompt, overflow);
                assert_eq!(limit, 77);
            }
            other => panic!("expected overflow, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn text_encode_is_deterministic_unit_norm() {
        let (_dir, enc) = load_synthetic();
        let a = enc
            .encode_text(&["ab on".to_string(), "ab on".to_string()])
            .unwrap();
        assert_eq!(a.row(0), a.row(1));
        for i in 0..a.len() {
            let n: f64 = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // Distinct prompts map to distinct directions.
        let b = enc
            .encode_text(&["ab".to_string(), "cd".to_string()])
            .unwrap();
        assert!(b.cosine(0, &b, 1) < 1.0 - 1e-9);
        let before = enc.param_checksum();
        let _ = enc.encode_text(&["abc".to_string()]).unwrap();
        assert_eq!(enc.param_checksum(), before);
    }

    #[test]
    fn image_encode_shares_the_text_space() {
        let (_dir, enc) = load_synthetic();
        let mut rng = Rng::new(3);
        let img =
            Tensor::randn(vec![1, 3, 224, 224], 0.1, &mut rng).map(|v| 0.5 + v.clamp(-0.5, 0.5));
        let emb = enc.encode_image(&img).unwrap();
        assert_eq!(emb.width(), 8);
        let n: f64 = emb.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        // Dot products against text embeddings are well-defined.
        let texts = enc.encode_text(&["ab".to_string()]).unwrap();
        let s = emb.dot(0, &texts, 0);
        assert!(s.is_finite() && (-1.0..=1.0).contains(&s));

        // Determinism across calls.
        let emb2 = enc.encode_image(&img).unwrap();
        assert_eq!(emb.row(0), emb2.row(0));

        // Wrong resolution is a shape error.
        let bad = Tensor::zeros(vec![1, 3, 64, 64]);
        assert!(matches!(enc.encode_image(&bad), Err(ZfError::Shape(_))));
    }

    /// Spot finite-difference check of d(embedding . probe)/d(pixel) on a
    /// few sampled pixels.
    #[test]
    fn image_gradient_reaches_pixels() {
        let (_dir, enc) = load_synthetic();
        let mut rng = Rng::new(4);
        let img =
            Tensor::randn(vec![1, 3, 224, 224], 0.1, &mut rng).map(|v| 0.5 + v.clamp(-0.5, 0.5));
        let probe = Tensor::randn(vec![1, 8], 1.0, &mut rng);

        let eval = |image: &Tensor| -> f64 {
            let mut g = Graph::new();
            let iv = g.constant(image.clone());
            let emb = enc.encode_image_vars(&mut g, iv).unwrap();
            let p = g.constant(probe.clone());
            let d = g.rowwise_dot(emb, p);
            g.value(d).data()[0]
        };

        let mut g = Graph::new();
        let iv = g.leaf(img.clone());
        let emb = enc.encode_image_vars(&mut g, iv).unwrap();
        let p = g.constant(probe.clone());
        let d = g.rowwise_dot(emb, p);
        let root = g.mean_elems(d);
        let grads = g.backward(root);
        let analytic = grads.get(iv).unwrap();

        let mut pick = Rng::new(5);
        let eps = 1e-5;
        for _ in 0..6 {
            let idx = (pick.next_u64() % (3 * 224 * 224) as u64) as usize;
            let mut plus = img.clone();
            let mut minus = img.clone();
            plus.data_mut()[idx] += eps;
            minus.data_mut()[idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            assert!(rel < 1e-3, "pixel {idx}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.zfckpt");
        let meta = write_synthetic_checkpoint(&path, 2).unwrap();
        // Drop one parameter and add a stray one.
        let (_, params): (ClipMeta, ParamStore) = read_archive(&path).unwrap();
        let mut mangled = ParamStore::new();
        for (name, t) in params.iter() {
            if name == "vision.class_token" {
                continue;
            }
            mangled.insert(name.clone(), t.clone());
        }
        mangled.insert("vision.stray", Tensor::zeros(vec![1]));
        write_archive(&path, &meta, &mangled).unwrap();
        match ClipEncoder::load(&path) {
            Err(ZfError::CheckpointKeys { missing, unexpected, .. }) => {
                assert_eq!(missing, vec!["vision.class_token".to_string()]);
                assert_eq!(unexpected, vec!["vision.stray".to_string()]);
            }
            other => panic!("expected CheckpointKeys, got {:?}", other.map(|_| ())),
        }
    }
}
