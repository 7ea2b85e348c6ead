//! Training objective: similarity loss, InfoNCE-style contrastive loss, and
//! their weighted combination.
//!
//! Similarity: -(1/B) sum_i <I_i, T_i> over matched unit-norm rows.
//! Contrastive: -(1/B) sum_i log( exp(tau <I_i,T_i>) / sum_j exp(tau <I_j,T_i>) ),
//! a negative log-softmax of the matching pair over images for each text,
//! computed with a stable log-sum-exp. Total: sim + lambda_c * contrast.

use crate::encoders::EmbeddingBatch;
use crate::error::{Result, ZfError};
use crate::graph::{Graph, VarId};

/// Contrast-ablation preset grid: every (lambda_c, tau) combination.
pub const LAMBDA_C_PRESETS: [f64; 2] = [0.01, 0.1];
pub const TAU_PRESETS: [f64; 2] = [30.0, 50.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParams {
    /// Contrastive regularizer coefficient.
    pub lambda_c: f64,
    /// Contrastive temperature; controls how steeply the penalty
    /// concentrates on the most similar non-matching pairs.
    pub tau: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams {
            lambda_c: 0.01,
            tau: 50.0,
        }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0) || !self.lambda_c.is_finite() {
            return Err(ZfError::Parameter(format!(
                "lambda_c must be nonnegative and finite, got {}",
                self.lambda_c
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(ZfError::Parameter(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Loss components of one evaluation (or the mean over views).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub contrast: f64,
    pub total: f64,
    pub per_query_sim: Vec<f64>,
}

impl LossBreakdown {
    /// Assemble so that total = sim + lambda_c * contrast holds exactly.
    pub fn assemble(sim: f64, contrast: f64, per_query_sim: Vec<f64>, params: &ObjectiveParams) -> Self {
        LossBreakdown {
            sim,
            contrast,
            total: sim + params.lambda_c * contrast,
            per_query_sim,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.sim.is_finite() && self.contrast.is_finite() && self.total.is_finite()
    }
}

fn check_pair(images: &EmbeddingBatch, texts: &EmbeddingBatch) -> Result<()> {
    if !images.is_normalized() || !texts.is_normalized() {
        return Err(ZfError::Contract(
            "similarity/contrastive losses require normalized embeddings".into(),
        ));
    }
    if images.len() != texts.len() || images.width() != texts.width() {
        return Err(ZfError::Shape(format!(
            "image batch [{},{}] and text batch [{},{}] must match",
            images.len(),
            images.width(),
            texts.len(),
            texts.width()
        )));
    }
    Ok(())
}

/// -(1/B) sum_i <I_i, T_i>; in [-1, 1] for unit-norm rows.
pub fn similarity_loss(images: &EmbeddingBatch, texts: &EmbeddingBatch) -> Result<f64> {
    Ok(similarity_per_query(images, texts)?
        .iter()
        .map(|d| -d)
        .sum::<f64>()
        / images.len() as f64)
}

/// The matched similarities <I_i, T_i> before negation/averaging.
pub fn similarity_per_query(images: &EmbeddingBatch, texts: &EmbeddingBatch) -> Result<Vec<f64>> {
    check_pair(images, texts)?;
    Ok((0..images.len())
        .map(|i| images.dot(i, texts, i))
        .collect())
}

/// InfoNCE over the batch: softmax over images j for each text i.
pub fn contrastive_loss(images: &EmbeddingBatch, texts: &EmbeddingBatch, tau: f64) -> Result<f64> {
    check_pair(images, texts)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(ZfError::Parameter(format!(
            "tau must be positive and finite, got {tau}"
        )));
    }
    let b = images.len();
    let mut loss = 0.0;
    for i in 0..b {
        // logits over images j for text i
        let logits: Vec<f64> = (0..b).map(|j| tau * images.dot(j, texts, i)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss -= logits[i] - lse;
    }
    Ok(loss / b as f64)
}

/// Full breakdown for one matched batch.
pub fn total_loss(
    images: &EmbeddingBatch,
    texts: &EmbeddingBatch,
    params: &ObjectiveParams,
) -> Result<LossBreakdown> {
    params.validate()?;
    let per_query = similarity_per_query(images, texts)?;
    let sim = -per_query.iter().sum::<f64>() / images.len() as f64;
    let contrast = contrastive_loss(images, texts, params.tau)?;
    Ok(LossBreakdown::assemble(sim, contrast, per_query, params))
}

/// Multi-view aggregation: the mean over views of per-view breakdowns.
/// Per-query similarities are averaged across views as well.
pub fn total_loss_multiview(
    views: &[(EmbeddingBatch, EmbeddingBatch)],
    params: &ObjectiveParams,
) -> Result<LossBreakdown> {
    if views.is_empty() {
        return Err(ZfError::Parameter("multi-view loss needs at least one view".into()));
    }
    let breakdowns: Vec<LossBreakdown> = views
        .iter()
        .map(|(i, t)| total_loss(i, t, params))
        .collect::<Result<_>>()?;
    let v = breakdowns.len() as f64;
    let sim = breakdowns.iter().map(|b| b.sim).sum::<f64>() / v;
    let contrast = breakdowns.iter().map(|b| b.contrast).sum::<f64>() / v;
    let q = breakdowns[0].per_query_sim.len();
    let per_query = (0..q)
        .map(|i| breakdowns.iter().map(|b| b.per_query_sim[i]).sum::<f64>() / v)
        .collect();
    Ok(LossBreakdown::assemble(sim, contrast, per_query, params))
}

// ----------------------------------------------------------------------
// Graph versions used inside the training step.
// ----------------------------------------------------------------------

/// Similarity loss over [B,H] vars with unit-norm rows -> scalar var.
/// Also returns the per-query matched dots [B].
pub fn similarity_loss_vars(
    graph: &mut Graph,
    images: VarId,
    texts: VarId,
) -> (VarId, VarId) {
    let per_query = graph.rowwise_dot(images, texts);
    let mean = graph.mean_elems(per_query);
    (graph.neg(mean), per_query)
}

/// Contrastive loss over [B,H] vars -> scalar var.
pub fn contrastive_loss_vars(
    graph: &mut Graph,
    images: VarId,
    texts: VarId,
    tau: f64,
) -> VarId {
    // logits[i][j] = tau <I_j, T_i>: rows index texts, columns images.
    let images_t = graph.transpose2(images);
    let sims = graph.matmul(texts, images_t);
    let logits = graph.affine(sims, tau, 0.0);
    let lse = graph.logsumexp_rows(logits);
    let matched = graph.take_diag(logits);
    let gap = graph.sub(lse, matched);
    graph.mean_elems(gap)
}

#[cfg(test)]
mod tests;
