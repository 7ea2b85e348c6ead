//! The adaptation loop: sample queries and cameras, run
//! generator -> binarize -> render -> encode, compute losses, update the
//! flow and decoder (or their ZeroConv copies), checkpoint, and log.
//!
//! Run directory layout:
//!   config.snapshot        effective flat config, reparseable
//!   queries.txt            one prompt per line, UTF-8
//!   checkpoints/iter-<n>   parameter archives (iter-0 is the untouched
//!                          initialization)
//!   log.jsonl              one JSON run record per iteration

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::binarization::{binarize_hard, binarize_soft_vars, BinarizationParams};
use crate::checkpoint::{import_clip_forge, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::encoders::VlmEncoder;
use crate::error::{Result, ZfError};
use crate::generator::{DecoderConfig, FlowConfig, Generator, NoiseMode, VoxelGrid};
use crate::graph::{Graph, VarId};
use crate::objectives::{
    contrastive_loss_vars, similarity_loss_vars, LossBreakdown, ObjectiveParams,
};
use crate::params::GraphParams;
use crate::params::ParamStore;
use crate::render::{sample_camera, CameraPose, VoxelRenderer};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// The prompt distribution p(t).
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    prompts: Vec<String>,
    weights: Option<Vec<f64>>,
}

impl QuerySet {
    /// Uniform distribution over unique prompts.
    pub fn new(prompts: Vec<String>) -> Result<Self> {
        QuerySet::build(prompts, None)
    }

    /// Weighted distribution; weights must be nonnegative and sum to 1.
    pub fn with_weights(prompts: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        QuerySet::build(prompts, Some(weights))
    }

    fn build(prompts: Vec<String>, weights: Option<Vec<f64>>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(ZfError::Parameter("query set must be non-empty".into()));
        }
        let unique: std::collections::BTreeSet<&String> = prompts.iter().collect();
        if unique.len() != prompts.len() {
            return Err(ZfError::Parameter("query prompts must be unique".into()));
        }
        if let Some(w) = &weights {
            if w.len() != prompts.len() {
                return Err(ZfError::Parameter(
                    "query weights must match the number of prompts".into(),
                ));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(ZfError::Parameter("query weights must be nonnegative".into()));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ZfError::Parameter(format!(
                    "query weights must sum to 1, got {sum}"
                )));
            }
        }
        Ok(QuerySet { prompts, weights })
    }

    /// Parse the `queries.txt` format: one prompt per line, blank lines
    /// skipped, uniform weights.
    pub fn from_text(text: &str) -> Result<Self> {
        let prompts: Vec<String> = text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        QuerySet::new(prompts)
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Batch composition for one iteration: uniform sets include every
    /// prompt exactly once; weighted sets draw `len` i.i.d. prompts.
    /// Passing explicit uniform weights therefore opts into i.i.d. draws
    /// instead of the every-prompt batch.
    fn batch_indices(&self, rng: &mut Rng) -> Vec<usize> {
        match &self.weights {
            None => (0..self.prompts.len()).collect(),
            Some(w) => {
                let mut out = Vec::with_capacity(self.prompts.len());
                for _ in 0..self.prompts.len() {
                    let draw = rng.next_f64();
                    let mut acc = 0.0;
                    let mut pick = self.prompts.len() - 1;
                    for (i, &wi) in w.iter().enumerate() {
                        acc += wi;
                        if draw < acc {
                            pick = i;
                            break;
                        }
                    }
                    out.push(pick);
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitMode {
    Random,
    PretrainedArchive(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Views rendered per query per iteration; the effective batch is
    /// batch_multiplier * |queries| images.
    pub batch_multiplier: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub zeroconv: bool,
    pub finetune_flow: bool,
    pub init: InitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 15_000,
            lr: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_multiplier: 3,
            seed: 0,
            checkpoint_every: 1000,
            zeroconv: false,
            finetune_flow: true,
            init: InitMode::Random,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(ZfError::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ZfError::Parameter(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if self.batch_multiplier == 0 {
            return Err(ZfError::Parameter("batch_multiplier must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(ZfError::Parameter("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub wall_time: f64,
    pub checkpoint_path: Option<String>,
}

/// Everything one training run needs.
pub struct TrainSetup<'a> {
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub decoder: DecoderConfig,
    pub binarize: BinarizationParams,
    pub objective: ObjectiveParams,
    pub queries: QuerySet,
    pub encoder: &'a dyn VlmEncoder,
    pub renderer: &'a dyn VoxelRenderer,
    pub out_dir: PathBuf,
    /// Effective flat config, persisted as `config.snapshot` and embedded
    /// in every checkpoint.
    pub config_snapshot: String,
}

pub struct TrainOutcome {
    pub generator: Generator,
    pub records: Vec<RunRecord>,
    pub final_checkpoint: PathBuf,
}

/// Adam with bias correction; epsilon fixed at 1e-8.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let value = params
                .get(name)
                .ok_or_else(|| ZfError::Parameter(format!("unknown parameter {name}")))?
                .clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            let mut new_value = value;
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                let out = new_value.data_mut();
                for ((p, g), (mi, vi)) in out
                    .iter_mut()
                    .zip(grad.data())
                    .zip(md.iter_mut().zip(vd.iter_mut()))
                {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            params.set(name, new_value)?;
        }
        Ok(())
    }
}

fn append_log_line(log: &mut fs::File, record: &RunRecord) -> Result<()> {
    let line = serde_json::to_string(record)
        .map_err(|e| ZfError::Parameter(format!("log serialization failed: {e}")))?;
    log.write_all(line.as_bytes())?;
    log.write_all(b"\n")?;
    log.flush()?;
    Ok(())
}

fn checkpoint_meta(setup: &TrainSetup, generator: &Generator, iteration: u64) -> CheckpointMeta {
    CheckpointMeta {
        iteration,
        seed: setup.train.seed,
        adapted: generator.is_adapted(),
        flow: generator.flow_cfg.clone(),
        decoder: generator.decoder_cfg.clone(),
        binarize: setup.binarize,
        config_snapshot: setup.config_snapshot.clone(),
    }
}

fn write_checkpoint(setup: &TrainSetup, generator: &Generator, iteration: u64) -> Result<PathBuf> {
    let path = setup
        .out_dir
        .join("checkpoints")
        .join(format!("iter-{iteration}"));
    save_checkpoint(&path, generator, &checkpoint_meta(setup, generator, iteration))?;
    Ok(path)
}

/// Build the generator according to the configured init mode. Pretrained
/// archives may be our own checkpoints or third-party bundles.
fn init_generator(setup: &TrainSetup) -> Result<Generator> {
    match &setup.train.init {
        InitMode::Random => {
            Generator::new(setup.flow.clone(), setup.decoder.clone(), setup.train.seed)
        }
        InitMode::PretrainedArchive(path) => {
            let generator = match load_checkpoint(path) {
                Ok((g, _)) => g,
                Err(ZfError::CheckpointKeys { .. }) | Err(ZfError::Checkpoint { .. }) => {
                    import_clip_forge(path)?.0
                }
                Err(e) => return Err(e),
            };
            if generator.flow_cfg != setup.flow
                || generator.decoder_cfg.resolution != setup.decoder.resolution
                || generator.decoder_cfg.num_blocks != setup.decoder.num_blocks
                || generator.decoder_cfg.base_channels != setup.decoder.base_channels
            {
                return Err(ZfError::Config(
                    "pretrained archive architecture does not match the configured flow/decoder"
                        .into(),
                ));
            }
            Ok(generator)
        }
    }
}

/// One iteration's forward/backward pass: returns the loss breakdown and
/// gradients for every trainable parameter.
#[allow(clippy::too_many_arguments)]
fn train_step(
    generator: &Generator,
    trainable: &dyn Fn(&str) -> bool,
    encoder: &dyn VlmEncoder,
    renderer: &dyn VoxelRenderer,
    binarize: &BinarizationParams,
    objective: &ObjectiveParams,
    cond: &Tensor,
    views: usize,
    cam_rng: &mut Rng,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let b = cond.shape()[0];
    let n = generator.decoder_cfg.resolution;
    let vol = n * n * n;
    let mut graph = Graph::new();
    let gp = GraphParams::bind(&mut graph, &generator.params, |name| trainable(name));

    let base = graph.constant(Tensor::zeros(vec![b, generator.flow_cfg.latent_dim]));
    let cond_var = graph.constant(cond.clone());
    let z = generator.flow_inverse_vars(&mut graph, &gp, base, cond_var);
    let grids = generator.decode_vars(&mut graph, &gp, z);
    let flat = graph.reshape(grids, vec![b, vol]);
    let soft = binarize_soft_vars(&mut graph, flat, binarize)?;

    // Poses are drawn query-major up front, so the camera stream does not
    // depend on the evaluation order below.
    let poses: Vec<Vec<CameraPose>> = (0..b)
        .map(|_| (0..views).map(|_| sample_camera(cam_rng)).collect())
        .collect();

    let mut per_view_sim = Vec::with_capacity(views);
    let mut per_view_con = Vec::with_capacity(views);
    let mut per_view_pq = Vec::with_capacity(views);
    let mut total: Option<VarId> = None;
    let s = renderer.output_resolution();
    for view in 0..views {
        let mut images = Vec::with_capacity(b);
        for (item, pose_row) in poses.iter().enumerate() {
            let row = graph.take_row(soft, item);
            let grid = graph.reshape(row, vec![n, n, n]);
            let img = renderer.render_vars(&mut graph, grid, &pose_row[view])?;
            images.push(graph.reshape(img, vec![1, 3, s, s]));
        }
        let stacked = graph.stack(&images);
        let batch_imgs = graph.reshape(stacked, vec![b, 3, s, s]);
        let resized = graph.resize_bilinear(batch_imgs, encoder.spec().image_resolution);
        let emb = encoder.encode_image_vars(&mut graph, resized)?;
        let (sim, per_query) = similarity_loss_vars(&mut graph, emb, cond_var);
        let con = contrastive_loss_vars(&mut graph, emb, cond_var, objective.tau);
        per_view_sim.push(graph.value(sim).item());
        per_view_con.push(graph.value(con).item());
        per_view_pq.push(graph.value(per_query).data().to_vec());
        let con_scaled = graph.affine(con, objective.lambda_c, 0.0);
        let view_total = graph.add(sim, con_scaled);
        total = Some(match total {
            None => view_total,
            Some(acc) => graph.add(acc, view_total),
        });
    }
    let total = graph.affine(total.expect("views >= 1"), 1.0 / views as f64, 0.0);

    let v = views as f64;
    let sim = per_view_sim.iter().sum::<f64>() / v;
    let contrast = per_view_con.iter().sum::<f64>() / v;
    let per_query_sim: Vec<f64> = (0..b)
        .map(|i| per_view_pq.iter().map(|pq| pq[i]).sum::<f64>() / v)
        .collect();
    let breakdown = LossBreakdown::assemble(sim, contrast, per_query_sim, objective);

    let grads_all = graph.backward(total);
    let mut grads = BTreeMap::new();
    for (name, var) in gp.iter() {
        if !graph.needs_grad(*var) {
            continue;
        }
        let g = grads_all.get_or_zeros(*var, generator.params.get(name).unwrap().shape());
        grads.insert(name.clone(), g);
    }
    Ok((breakdown, grads))
}

pub fn train(setup: &TrainSetup) -> Result<TrainOutcome> {
    setup.train.validate()?;
    setup.binarize.validate()?;
    setup.objective.validate()?;
    let views = setup.train.batch_multiplier;

    fs::create_dir_all(setup.out_dir.join("checkpoints"))?;
    crate::archive::atomic_write(
        &setup.out_dir.join("config.snapshot"),
        setup.config_snapshot.as_bytes(),
    )?;
    let queries_text: String = setup
        .queries
        .prompts()
        .iter()
        .map(|p| format!("{p}\n"))
        .collect();
    crate::archive::atomic_write(&setup.out_dir.join("queries.txt"), queries_text.as_bytes())?;

    let mut generator = init_generator(setup)?;
    if setup.train.zeroconv && !generator.is_adapted() {
        generator.wrap_zeroconv()?;
    }

    let encoder_checksum = setup.encoder.param_checksum();
    let adapted = generator.is_adapted();
    let finetune_flow = setup.train.finetune_flow;
    let is_trainable = move |name: &str| -> bool {
        if name.starts_with("flow.") {
            return finetune_flow;
        }
        if adapted {
            name.contains(crate::generator::TUNED_INFIX)
                || name.contains(crate::generator::ZEROCONV_INFIX)
        } else {
            name.starts_with("decoder.")
        }
    };
    let frozen_checksum_before = generator.params.checksum_filtered(|n| !is_trainable(n));

    // Prompt embeddings are computed once; the encoder is frozen.
    let text_embs = setup.encoder.encode_text(setup.queries.prompts())?;
    if text_embs.width() != generator.flow_cfg.condition_dim {
        return Err(ZfError::Config(format!(
            "encoder width {} does not match flow condition_dim {}",
            text_embs.width(),
            generator.flow_cfg.condition_dim
        )));
    }

    let mut log = fs::File::create(setup.out_dir.join("log.jsonl"))?;
    let mut records = Vec::new();
    let mut adam = Adam::new(setup.train.lr, setup.train.adam_beta1, setup.train.adam_beta2);

    // iter-0: the untouched initialization, kept for the partial-training
    // inspection workflow.
    write_checkpoint(setup, &generator, 0)?;

    let h = text_embs.width();
    for iteration in 1..=setup.train.iterations {
        let started = Instant::now();
        let mut batch_rng = Rng::stream(setup.train.seed, "batch", iteration);
        let batch = setup.queries.batch_indices(&mut batch_rng);
        let mut cond_data = Vec::with_capacity(batch.len() * h);
        for &q in &batch {
            cond_data.extend_from_slice(text_embs.row(q));
        }
        let cond = Tensor::from_vec(vec![batch.len(), h], cond_data);

        let mut cam_rng = Rng::stream(setup.train.seed, "camera", iteration);
        let (breakdown, grads) = train_step(
            &generator,
            &is_trainable,
            setup.encoder,
            setup.renderer,
            &setup.binarize,
            &setup.objective,
            &cond,
            views,
            &mut cam_rng,
        )?;

        if !breakdown.is_finite() {
            return Err(ZfError::NonFinite {
                iteration,
                details: format!(
                    "loss breakdown sim={} contrast={} total={}",
                    breakdown.sim, breakdown.contrast, breakdown.total
                ),
            });
        }
        for (name, g) in &grads {
            if !g.is_finite() {
                return Err(ZfError::NonFinite {
                    iteration,
                    details: format!("gradient of {name} is not finite"),
                });
            }
        }

        adam.step(&mut generator.params, &grads)?;

        let checkpoint_path = if iteration % setup.train.checkpoint_every == 0
            || iteration == setup.train.iterations
        {
            Some(write_checkpoint(setup, &generator, iteration)?)
        } else {
            None
        };
        let record = RunRecord {
            iteration,
            loss: breakdown,
            wall_time: started.elapsed().as_secs_f64(),
            checkpoint_path: checkpoint_path
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned()),
        };
        append_log_line(&mut log, &record)?;
        records.push(record);
    }

    // Conservation: the encoder and every frozen parameter must be
    // bit-identical to their pre-training state.
    if setup.encoder.param_checksum() != encoder_checksum {
        return Err(ZfError::Contract(
            "encoder parameters changed during training".into(),
        ));
    }
    if generator.params.checksum_filtered(|n| !is_trainable(n)) != frozen_checksum_before {
        return Err(ZfError::Contract(
            "frozen parameters changed during training".into(),
        ));
    }

    let final_checkpoint = setup
        .out_dir
        .join("checkpoints")
        .join(format!("iter-{}", setup.train.iterations));
    Ok(TrainOutcome {
        generator,
        records,
        final_checkpoint,
    })
}

/// Generate a hard-binarized grid from a checkpoint for one prompt.
pub fn generate(
    checkpoint_path: &Path,
    prompt: &str,
    noise_mode: NoiseMode,
    seed: u64,
    encoder: &dyn VlmEncoder,
) -> Result<VoxelGrid> {
    let (generator, meta) = load_checkpoint(checkpoint_path)?;
    generate_with(&generator, meta.binarize.gamma, prompt, noise_mode, seed, encoder)
}

/// Generate from an in-memory generator; hard-binarizes at `gamma`.
pub fn generate_with(
    generator: &Generator,
    gamma: f64,
    prompt: &str,
    noise_mode: NoiseMode,
    seed: u64,
    encoder: &dyn VlmEncoder,
) -> Result<VoxelGrid> {
    let soft = generate_soft(generator, prompt, noise_mode, seed, encoder)?;
    Ok(binarize_hard(&soft, gamma))
}

/// Raw (real-valued) occupancy for one prompt; the export path for
/// f32-soft voxel files and previews.
pub fn generate_soft(
    generator: &Generator,
    prompt: &str,
    noise_mode: NoiseMode,
    seed: u64,
    encoder: &dyn VlmEncoder,
) -> Result<VoxelGrid> {
    let text = encoder.encode_text(&[prompt.to_string()])?;
    let z = generator.sample_latent(&text, noise_mode, seed)?;
    let mut grids = generator.decode_occupancy(&z)?;
    Ok(grids.remove(0))
}
