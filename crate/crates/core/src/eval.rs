//! Quantitative diagnostics: pairwise voxel IoU as a mode-collapse
//! measure, text-to-shape retrieval accuracy (R-precision), and a
//! simulated two-alternative forced-choice test standing in for a human
//! survey.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::VlmEncoder;
use crate::error::{Result, ZfError};
use crate::generator::VoxelGrid;
use crate::render::{pose_from_uniform, render, RenderConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::QuerySet;

/// Symmetric matrix of pairwise intersection-over-union values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IoUMatrix {
    /// Row-major Q x Q values in [0,1].
    pub values: Vec<f64>,
    pub query_labels: Vec<String>,
    /// Which grids are empty; empty-vs-empty pairs score 1 and are flagged
    /// so total collapse to emptiness cannot hide behind the metric.
    pub empty: Vec<bool>,
}

impl IoUMatrix {
    pub fn len(&self) -> usize {
        self.query_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    /// Mean over all off-diagonal entries; the collapse diagnostic.
    pub fn mean_offdiag(&self) -> f64 {
        let q = self.len();
        if q < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..q {
            for j in 0..q {
                if i != j {
                    acc += self.get(i, j);
                }
            }
        }
        acc / (q * (q - 1)) as f64
    }

    /// Plain-text table for the report file.
    pub fn to_table(&self) -> String {
        let q = self.len();
        let width = self
            .query_labels
            .iter()
            .map(|l| l.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = String::new();
        out.push_str(&format!("{:width$} ", ""));
        for label in &self.query_labels {
            out.push_str(&format!("{label:>width$} "));
        }
        out.push('\n');
        for i in 0..q {
            out.push_str(&format!("{:width$} ", self.query_labels[i]));
            for j in 0..q {
                out.push_str(&format!("{:>width$.4} ", self.get(i, j)));
            }
            if self.empty[i] {
                out.push_str(" (empty)");
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise IoU over hard-binarized grids. IoU of two empty grids is
/// defined as 1 and flagged through [`IoUMatrix::empty`].
pub fn pairwise_iou(grids: &[VoxelGrid], labels: &[String]) -> Result<IoUMatrix> {
    if grids.len() != labels.len() {
        return Err(ZfError::Shape(format!(
            "{} grids but {} labels",
            grids.len(),
            labels.len()
        )));
    }
    if grids.is_empty() {
        return Err(ZfError::Parameter("IoU needs at least one grid".into()));
    }
    let n = grids[0].resolution();
    for g in grids {
        if !g.binarized() {
            return Err(ZfError::Contract("IoU requires hard-binarized grids".into()));
        }
        if g.resolution() != n {
            return Err(ZfError::Shape(format!(
                "mixed grid resolutions: {} vs {n}",
                g.resolution()
            )));
        }
    }
    let q = grids.len();
    let mut values = vec![0.0; q * q];
    for i in 0..q {
        for j in i..q {
            let a = grids[i].values().data();
            let b = grids[j].values().data();
            let mut inter = 0usize;
            let mut union = 0usize;
            for (x, y) in a.iter().zip(b) {
                let (x, y) = (*x != 0.0, *y != 0.0);
                inter += usize::from(x && y);
                union += usize::from(x || y);
            }
            let iou = if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            };
            values[i * q + j] = iou;
            values[j * q + i] = iou;
        }
    }
    Ok(IoUMatrix {
        values,
        query_labels: labels.to_vec(),
        empty: grids.iter().map(|g| g.is_all_zero()).collect(),
    })
}

/// Mean image embedding of a query's views, in raw (pre-normalization)
/// form; argmax comparisons are scale-invariant per query.
fn mean_view_embedding(
    views: &[Tensor],
    encoder: &dyn VlmEncoder,
) -> Result<Vec<f64>> {
    if views.is_empty() {
        return Err(ZfError::Parameter("each query needs at least one view".into()));
    }
    let r = encoder.spec().image_resolution;
    let mut stacked = Vec::with_capacity(views.len() * 3 * r * r);
    for v in views {
        if v.shape() != [3, r, r] {
            return Err(ZfError::Shape(format!(
                "view image must be [3,{r},{r}], got {:?}",
                v.shape()
            )));
        }
        stacked.extend_from_slice(v.data());
    }
    let batch = encoder.encode_image(&Tensor::from_vec(vec![views.len(), 3, r, r], stacked))?;
    let h = batch.width();
    let mut mean = vec![0.0; h];
    for i in 0..batch.len() {
        for (m, v) in mean.iter_mut().zip(batch.row(i)) {
            *m += v / batch.len() as f64;
        }
    }
    Ok(mean)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn r_precision_from_means(means: &[Vec<f64>], texts: &crate::encoders::EmbeddingBatch) -> f64 {
    let q_count = means.len();
    let mut correct = 0usize;
    for (q, mean) in means.iter().enumerate() {
        let own = dot(mean, texts.row(q));
        let beaten = (0..q_count)
            .filter(|&j| j != q)
            .all(|j| own > dot(mean, texts.row(j)));
        correct += usize::from(beaten);
    }
    correct as f64 / q_count as f64
}

/// Fraction of queries whose mean-view embedding is strictly most similar
/// to its own prompt's text embedding. Ties count as incorrect.
pub fn r_precision(
    renders: &[Vec<Tensor>],
    queries: &QuerySet,
    encoder: &dyn VlmEncoder,
) -> Result<f64> {
    if renders.len() != queries.len() {
        return Err(ZfError::Shape(format!(
            "{} render sets for {} queries",
            renders.len(),
            queries.len()
        )));
    }
    let texts = encoder.encode_text(queries.prompts())?;
    let means: Vec<Vec<f64>> = renders
        .iter()
        .map(|views| mean_view_embedding(views, encoder))
        .collect::<Result<_>>()?;
    Ok(r_precision_from_means(&means, &texts))
}

fn forced_choice_from_means(
    means: &[Vec<f64>],
    texts: &crate::encoders::EmbeddingBatch,
    rng: &mut Rng,
) -> f64 {
    let q_count = means.len();
    let mut correct = 0.0;
    let mut total = 0usize;
    for q in 0..q_count {
        for d in 0..q_count {
            if q == d {
                continue;
            }
            total += 1;
            let s_match = dot(&means[q], texts.row(q));
            let s_distract = dot(&means[d], texts.row(q));
            if s_match > s_distract {
                correct += 1.0;
            } else if s_match == s_distract && rng.next_f64() < 0.5 {
                correct += 1.0;
            }
        }
    }
    correct / total as f64
}

/// Simulated two-alternative forced choice over all ordered
/// (query, distractor) pairs: correct iff the query's render is strictly
/// more similar to its prompt than the distractor's render is; exact ties
/// split by coin flip.
pub fn forced_choice(
    renders: &[Vec<Tensor>],
    queries: &QuerySet,
    encoder: &dyn VlmEncoder,
    rng: &mut Rng,
) -> Result<f64> {
    if queries.len() < 2 {
        return Err(ZfError::Config(
            "forced choice needs at least two queries".into(),
        ));
    }
    if renders.len() != queries.len() {
        return Err(ZfError::Shape(format!(
            "{} render sets for {} queries",
            renders.len(),
            queries.len()
        )));
    }
    let texts = encoder.encode_text(queries.prompts())?;
    let means: Vec<Vec<f64>> = renders
        .iter()
        .map(|views| mean_view_embedding(views, encoder))
        .collect::<Result<_>>()?;
    Ok(forced_choice_from_means(&means, &texts, rng))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerQueryReport {
    pub label: String,
    /// Similarity of the query's mean view embedding to its own prompt.
    pub matched_similarity: f64,
    pub occupied_voxels: usize,
    pub empty: bool,
}

/// The `eval` command's report. The paper's human survey accuracies
/// (95.0% in-distribution / 95.7% out / 95.4% overall) are echoed as a
/// fixed reference alongside the simulated metric, never as a
/// reproduction claim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_precision: f64,
    pub forced_choice_accuracy: f64,
    pub mean_offdiag_iou: f64,
    pub human_survey_reference: HumanSurveyReference,
    pub per_query: Vec<PerQueryReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumanSurveyReference {
    pub in_distribution_pct: f64,
    pub out_of_distribution_pct: f64,
    pub overall_pct: f64,
}

impl Default for HumanSurveyReference {
    fn default() -> Self {
        HumanSurveyReference {
            in_distribution_pct: 95.0,
            out_of_distribution_pct: 95.7,
            overall_pct: 95.4,
        }
    }
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("r_precision", self.r_precision),
            ("forced_choice_accuracy", self.forced_choice_accuracy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ZfError::Contract(format!("{name} {v} out of [0,1]")));
            }
        }
        Ok(())
    }
}

/// Render the fixed evaluation views of a hard grid.
pub fn eval_views(
    grid: &VoxelGrid,
    encoder_resolution: usize,
    views: usize,
    seed: u64,
    query_index: u64,
) -> Result<Vec<Tensor>> {
    let cfg = RenderConfig {
        image_size: encoder_resolution,
        ..RenderConfig::default()
    };
    let mut rng = Rng::stream(seed, "eval-camera", query_index);
    (0..views)
        .map(|_| {
            let pose = pose_from_uniform(rng.next_f64(), rng.next_f64());
            render(grid, &pose, &cfg)
        })
        .collect()
}

/// Full evaluation of per-query hard grids: renders deterministic views,
/// computes retrieval and collapse metrics, and assembles the report.
pub fn evaluate_grids(
    grids: &[VoxelGrid],
    queries: &QuerySet,
    encoder: &dyn VlmEncoder,
    seed: u64,
) -> Result<(EvalReport, IoUMatrix)> {
    if grids.len() != queries.len() {
        return Err(ZfError::Shape(format!(
            "{} grids for {} queries",
            grids.len(),
            queries.len()
        )));
    }
    let views = 4usize;
    let r = encoder.spec().image_resolution;
    let texts = encoder.encode_text(queries.prompts())?;

    // An empty grid can render to an exactly constant image whose toy
    // embedding is degenerate; total collapse to emptiness must surface in
    // the report (empty flags, lost comparisons), not abort it. Empty
    // grids contribute a zero embedding, which strictly loses every
    // retrieval comparison.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(queries.len());
    for (i, grid) in grids.iter().enumerate() {
        if grid.is_all_zero() {
            means.push(vec![0.0; texts.width()]);
        } else {
            let views = eval_views(grid, r, views, seed, i as u64)?;
            means.push(mean_view_embedding(&views, encoder)?);
        }
    }

    let rp = r_precision_from_means(&means, &texts);
    let fc = if queries.len() >= 2 {
        let mut rng = Rng::stream(seed, "eval-ties", 0);
        forced_choice_from_means(&means, &texts, &mut rng)
    } else {
        // A single query has no distractor pairs; retrieval is trivially 1.
        1.0
    };
    let iou = pairwise_iou(grids, queries.prompts())?;

    let per_query = (0..queries.len())
        .map(|q| PerQueryReport {
            label: queries.prompts()[q].clone(),
            matched_similarity: dot(&means[q], texts.row(q)),
            occupied_voxels: grids[q].occupied_count(),
            empty: grids[q].is_all_zero(),
        })
        .collect();

    let report = EvalReport {
        r_precision: rp,
        forced_choice_accuracy: fc,
        mean_offdiag_iou: iou.mean_offdiag(),
        human_survey_reference: HumanSurveyReference::default(),
        per_query,
    };
    report.validate()?;
    Ok((report, iou))
}

/// Evaluate a run directory: load the latest checkpoint, regenerate every
/// query with zero noise, and score. Returns the report plus the IoU
/// matrix. The caller supplies the encoder (rebuilt from the run config).
pub fn evaluate_run(
    run_dir: &Path,
    encoder: &dyn VlmEncoder,
    seed: u64,
) -> Result<(EvalReport, IoUMatrix)> {
    let queries_text = fs::read_to_string(run_dir.join("queries.txt"))
        .map_err(|e| ZfError::Config(format!("run dir has no queries.txt: {e}")))?;
    let queries = QuerySet::from_text(&queries_text)?;
    let checkpoint = latest_checkpoint(run_dir)?;
    let (generator, meta) = crate::checkpoint::load_checkpoint(&checkpoint)?;
    let grids: Vec<VoxelGrid> = queries
        .prompts()
        .iter()
        .map(|p| {
            crate::trainer::generate_with(
                &generator,
                meta.binarize.gamma,
                p,
                crate::generator::NoiseMode::Zero,
                seed,
                encoder,
            )
        })
        .collect::<Result<_>>()?;
    evaluate_grids(&grids, &queries, encoder, seed)
}

/// The highest-iteration checkpoint in `<run>/checkpoints`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<std::path::PathBuf> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(u64, std::path::PathBuf)> = None;
    let entries = fs::read_dir(&dir)
        .map_err(|e| ZfError::Config(format!("run dir has no checkpoints directory: {e}")))?;
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(iter) = name.strip_prefix("iter-").and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if best.as_ref().map(|(b, _)| iter > *b).unwrap_or(true) {
            best = Some((iter, path));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        ZfError::Config(format!("no checkpoints found under {}", dir.display()))
    })
}

#[cfg(test)]
mod tests;
