//! Flat key-value run configuration.
//!
//! Syntax: one `key = value` per line; `#` starts a comment; blank lines
//! ignored. Every key has a documented default; unknown and duplicate keys
//! are hard errors naming the key and line. The effective configuration is
//! persisted as `config.snapshot` in a form that reparses to the identical
//! configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::binarization::BinarizationParams;
use crate::encoders::{ClipEncoder, EncoderKind, ToyEncoder, VlmEncoder};
use crate::error::{Result, ZfError};
use crate::generator::{DecoderConfig, FlowConfig};
use crate::objectives::ObjectiveParams;
use crate::render::{BuiltinRenderer, RenderConfig};
use crate::trainer::{InitMode, TrainConfig};

/// Typed view of a full run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder_kind: EncoderKind,
    pub encoder_seed: u64,
    pub encoder_embedding_width: usize,
    pub encoder_image_resolution: usize,
    pub encoder_checkpoint: String,

    pub flow_num_coupling_blocks: usize,
    pub flow_hidden_width: usize,
    pub flow_latent_dim: usize,

    pub decoder_num_blocks: usize,
    pub decoder_resolution: usize,
    pub decoder_base_channels: usize,

    pub binarize_beta: f64,
    pub binarize_gamma: f64,

    pub render_image_size: usize,
    pub render_steps_per_ray: usize, // 0 = auto (2N)
    pub render_background: f64,
    pub render_plugin: String,

    pub loss_lambda_c: f64,
    pub loss_tau: f64,
    pub loss_views_per_query: usize,

    pub train_iterations: u64,
    pub train_lr: f64,
    pub train_adam_beta1: f64,
    pub train_adam_beta2: f64,
    pub train_seed: u64,
    pub train_checkpoint_every: u64,
    pub train_zeroconv: bool,
    pub train_finetune_flow: bool,
    pub train_init: String, // "random" | "pretrained-archive"
    pub train_archive: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder_kind: EncoderKind::Toy,
            encoder_seed: 0,
            encoder_embedding_width: 64,
            encoder_image_resolution: 224,
            encoder_checkpoint: String::new(),
            flow_num_coupling_blocks: 5,
            flow_hidden_width: 1024,
            flow_latent_dim: 128,
            decoder_num_blocks: 5,
            decoder_resolution: 128,
            decoder_base_channels: 32,
            binarize_beta: 200.0,
            binarize_gamma: 0.05,
            render_image_size: 224,
            render_steps_per_ray: 0,
            render_background: 0.0,
            render_plugin: "builtin".to_string(),
            loss_lambda_c: 0.01,
            loss_tau: 50.0,
            loss_views_per_query: 3,
            train_iterations: 15_000,
            train_lr: 1e-5,
            train_adam_beta1: 0.9,
            train_adam_beta2: 0.999,
            train_seed: 0,
            train_checkpoint_every: 1000,
            train_zeroconv: false,
            train_finetune_flow: true,
            train_init: "random".to_string(),
            train_archive: String::new(),
        }
    }
}

/// Raw `key = value` lines with positions, before typing.
fn parse_flat(text: &str) -> Result<BTreeMap<String, (String, usize)>> {
    let mut entries = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(ZfError::ConfigParse {
                line: line_no,
                message: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = line[..eq].trim().to_string();
        let value = line[eq + 1..].trim().to_string();
        if key.is_empty() {
            return Err(ZfError::ConfigParse {
                line: line_no,
                message: "empty key".into(),
            });
        }
        if entries.insert(key.clone(), (value, line_no)).is_some() {
            return Err(ZfError::ConfigParse {
                line: line_no,
                message: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(entries)
}

struct Typed<'a> {
    entries: BTreeMap<String, (String, usize)>,
    consumed: std::collections::BTreeSet<String>,
    _marker: std::marker::PhantomData<&'a ()>,
}

impl Typed<'_> {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.consumed.insert(key.to_string());
        self.entries.get(key).cloned()
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some((value, line)) => value.parse().map_err(|_| ZfError::ConfigParse {
                line,
                message: format!(
                    "key `{key}`: cannot parse {value:?} as {}",
                    std::any::type_name::<T>()
                ),
            }),
        }
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        match self.take(key) {
            None => default.to_string(),
            Some((value, _)) => value,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_flat(text)?;
        let mut t = Typed {
            entries,
            consumed: Default::default(),
            _marker: std::marker::PhantomData,
        };
        let d = RunConfig::default();

        let kind_raw = t.string("encoder.kind", "toy");
        let encoder_kind = match kind_raw.as_str() {
            "toy" => EncoderKind::Toy,
            "real-vlm" => EncoderKind::RealVlm,
            other => {
                return Err(ZfError::Config(format!(
                    "encoder.kind must be `toy` or `real-vlm`, got {other:?}"
                )))
            }
        };

        let cfg = RunConfig {
            encoder_kind,
            encoder_seed: t.parse("encoder.seed", d.encoder_seed)?,
            encoder_embedding_width: t.parse("encoder.embedding_width", d.encoder_embedding_width)?,
            encoder_image_resolution: t.parse("encoder.image_resolution", d.encoder_image_resolution)?,
            encoder_checkpoint: t.string("encoder.checkpoint", ""),
            flow_num_coupling_blocks: t.parse("flow.num_coupling_blocks", d.flow_num_coupling_blocks)?,
            flow_hidden_width: t.parse("flow.hidden_width", d.flow_hidden_width)?,
            flow_latent_dim: t.parse("flow.latent_dim", d.flow_latent_dim)?,
            decoder_num_blocks: t.parse("decoder.num_blocks", d.decoder_num_blocks)?,
            decoder_resolution: t.parse("decoder.resolution", d.decoder_resolution)?,
            decoder_base_channels: t.parse("decoder.base_channels", d.decoder_base_channels)?,
            binarize_beta: t.parse("binarize.beta", d.binarize_beta)?,
            binarize_gamma: t.parse("binarize.gamma", d.binarize_gamma)?,
            render_image_size: t.parse("render.image_size", d.render_image_size)?,
            render_steps_per_ray: t.parse("render.steps_per_ray", d.render_steps_per_ray)?,
            render_background: t.parse("render.background", d.render_background)?,
            render_plugin: t.string("render.plugin", "builtin"),
            loss_lambda_c: t.parse("loss.lambda_c", d.loss_lambda_c)?,
            loss_tau: t.parse("loss.tau", d.loss_tau)?,
            loss_views_per_query: t.parse("loss.views_per_query", d.loss_views_per_query)?,
            train_iterations: t.parse("train.iterations", d.train_iterations)?,
            train_lr: t.parse("train.lr", d.train_lr)?,
            train_adam_beta1: t.parse("train.adam_beta1", d.train_adam_beta1)?,
            train_adam_beta2: t.parse("train.adam_beta2", d.train_adam_beta2)?,
            train_seed: t.parse("train.seed", d.train_seed)?,
            train_checkpoint_every: t.parse("train.checkpoint_every", d.train_checkpoint_every)?,
            train_zeroconv: t.parse("train.zeroconv", d.train_zeroconv)?,
            train_finetune_flow: t.parse("train.finetune_flow", d.train_finetune_flow)?,
            train_init: t.string("train.init", "random"),
            train_archive: t.string("train.archive", ""),
        };

        // `train.batch_multiplier` is the trainer-side name for
        // `loss.views_per_query`; accept it as an alias but reject
        // contradictions.
        let mut cfg = cfg;
        if let Some((value, line)) = t.take("train.batch_multiplier") {
            let bm: usize = value.parse().map_err(|_| ZfError::ConfigParse {
                line,
                message: format!("key `train.batch_multiplier`: cannot parse {value:?} as usize"),
            })?;
            if t.entries.contains_key("loss.views_per_query") && bm != cfg.loss_views_per_query {
                return Err(ZfError::Config(format!(
                    "train.batch_multiplier ({bm}) contradicts loss.views_per_query ({})",
                    cfg.loss_views_per_query
                )));
            }
            cfg.loss_views_per_query = bm;
        }

        // Unknown keys are hard errors.
        for (key, (_, line)) in &t.entries {
            if !t.consumed.contains(key) {
                return Err(ZfError::UnknownConfigKey {
                    key: key.clone(),
                    line: *line,
                });
            }
        }

        match cfg.train_init.as_str() {
            "random" => {}
            "pretrained-archive" => {
                if cfg.train_archive.is_empty() {
                    return Err(ZfError::Config(
                        "train.init = pretrained-archive requires train.archive".into(),
                    ));
                }
            }
            other => {
                return Err(ZfError::Config(format!(
                    "train.init must be `random` or `pretrained-archive`, got {other:?}"
                )))
            }
        }
        if cfg.encoder_kind == EncoderKind::RealVlm && cfg.encoder_checkpoint.is_empty() {
            return Err(ZfError::Config(
                "encoder.kind = real-vlm requires encoder.checkpoint".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ZfError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The effective configuration as flat text; reparsing it yields an
    /// identical `RunConfig`.
    pub fn snapshot_text(&self) -> String {
        let kind = match self.encoder_kind {
            EncoderKind::Toy => "toy",
            EncoderKind::RealVlm => "real-vlm",
        };
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("encoder.kind", kind.to_string());
        push("encoder.seed", self.encoder_seed.to_string());
        push("encoder.embedding_width", self.encoder_embedding_width.to_string());
        push("encoder.image_resolution", self.encoder_image_resolution.to_string());
        if !self.encoder_checkpoint.is_empty() {
            push("encoder.checkpoint", self.encoder_checkpoint.clone());
        }
        push("flow.num_coupling_blocks", self.flow_num_coupling_blocks.to_string());
        push("flow.hidden_width", self.flow_hidden_width.to_string());
        push("flow.latent_dim", self.flow_latent_dim.to_string());
        push("decoder.num_blocks", self.decoder_num_blocks.to_string());
        push("decoder.resolution", self.decoder_resolution.to_string());
        push("decoder.base_channels", self.decoder_base_channels.to_string());
        push("binarize.beta", format_f64(self.binarize_beta));
        push("binarize.gamma", format_f64(self.binarize_gamma));
        push("render.image_size", self.render_image_size.to_string());
        push("render.steps_per_ray", self.render_steps_per_ray.to_string());
        push("render.background", format_f64(self.render_background));
        push("render.plugin", self.render_plugin.clone());
        push("loss.lambda_c", format_f64(self.loss_lambda_c));
        push("loss.tau", format_f64(self.loss_tau));
        push("loss.views_per_query", self.loss_views_per_query.to_string());
        push("train.iterations", self.train_iterations.to_string());
        push("train.lr", format_f64(self.train_lr));
        push("train.adam_beta1", format_f64(self.train_adam_beta1));
        push("train.adam_beta2", format_f64(self.train_adam_beta2));
        push("train.seed", self.train_seed.to_string());
        push("train.checkpoint_every", self.train_checkpoint_every.to_string());
        push("train.zeroconv", self.train_zeroconv.to_string());
        push("train.finetune_flow", self.train_finetune_flow.to_string());
        push("train.init", self.train_init.clone());
        if !self.train_archive.is_empty() {
            push("train.archive", self.train_archive.clone());
        }
        s
    }

    // -- typed projections ------------------------------------------------

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            num_coupling_blocks: self.flow_num_coupling_blocks,
            hidden_width: self.flow_hidden_width,
            latent_dim: self.flow_latent_dim,
            condition_dim: self.encoder_embedding_width,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            num_blocks: self.decoder_num_blocks,
            resolution: self.decoder_resolution,
            base_channels: self.decoder_base_channels,
            zeroconv_enabled: self.train_zeroconv,
        }
    }

    pub fn binarize_params(&self) -> BinarizationParams {
        BinarizationParams {
            beta: self.binarize_beta,
            gamma: self.binarize_gamma,
        }
    }

    pub fn objective_params(&self) -> ObjectiveParams {
        ObjectiveParams {
            lambda_c: self.loss_lambda_c,
            tau: self.loss_tau,
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            image_size: self.render_image_size,
            steps_per_ray: if self.render_steps_per_ray == 0 {
                None
            } else {
                Some(self.render_steps_per_ray)
            },
            background: self.render_background,
            projection: crate::render::Projection::Perspective,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let init = match self.train_init.as_str() {
            "random" => InitMode::Random,
            "pretrained-archive" => InitMode::PretrainedArchive(PathBuf::from(&self.train_archive)),
            other => return Err(ZfError::Config(format!("invalid train.init {other:?}"))),
        };
        Ok(TrainConfig {
            iterations: self.train_iterations,
            lr: self.train_lr,
            adam_beta1: self.train_adam_beta1,
            adam_beta2: self.train_adam_beta2,
            batch_multiplier: self.loss_views_per_query,
            seed: self.train_seed,
            checkpoint_every: self.train_checkpoint_every,
            zeroconv: self.train_zeroconv,
            finetune_flow: self.train_finetune_flow,
            init,
        })
    }

    /// Encoder selected by `encoder.kind`.
    pub fn build_encoder(&self) -> Result<Box<dyn VlmEncoder>> {
        match self.encoder_kind {
            EncoderKind::Toy => Ok(Box::new(ToyEncoder::new(
                self.encoder_seed,
                self.encoder_embedding_width,
                self.encoder_image_resolution,
            )?)),
            EncoderKind::RealVlm => Ok(Box::new(ClipEncoder::load(Path::new(
                &self.encoder_checkpoint,
            ))?)),
        }
    }

    /// Renderer selected by `render.plugin`. Only the built-in analytic
    /// renderer is registered; other names direct the user back to it.
    pub fn build_renderer(&self) -> Result<BuiltinRenderer> {
        match self.render_plugin.as_str() {
            "builtin" => Ok(BuiltinRenderer::new(self.render_config())),
            other => Err(ZfError::Config(format!(
                "no renderer plugin named {other:?} is registered; use the built-in renderer (render.plugin = builtin)"
            ))),
        }
    }
}

/// Round-trippable f64 formatting for snapshots.
fn format_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.binarize_beta, 200.0);
        assert_eq!(cfg.binarize_gamma, 0.05);
        assert_eq!(cfg.loss_tau, 50.0);
        assert_eq!(cfg.loss_lambda_c, 0.01);
        assert_eq!(cfg.train_lr, 1e-5);
        assert_eq!(cfg.train_iterations, 15_000);
        assert_eq!(cfg.flow_hidden_width, 1024);
        assert_eq!(cfg.flow_latent_dim, 128);
        assert_eq!(cfg.decoder_resolution, 128);
        assert_eq!(cfg.loss_views_per_query, 3);
    }

    #[test]
    fn overrides_comments_and_snapshot_round_trip() {
        let text = "\n# smoke settings\nencoder.kind = toy\nencoder.embedding_width = 16\ndecoder.resolution = 16  # small grid\ndecoder.num_blocks = 2\ntrain.iterations = 50\nloss.lambda_c = 0\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.decoder_resolution, 16);
        assert_eq!(cfg.loss_lambda_c, 0.0);
        let snap = cfg.snapshot_text();
        let again = RunConfig::parse(&snap).unwrap();
        assert_eq!(cfg, again, "snapshot must reparse to the identical config");
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let err = RunConfig::parse("loss.lamda_c = 0.5\n").unwrap_err();
        match err {
            ZfError::UnknownConfigKey { key, line } => {
                assert_eq!(key, "loss.lamda_c");
                assert_eq!(line, 1);
            }
            other => panic!("expected UnknownConfigKey, got {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_position() {
        let err = RunConfig::parse("loss.tau 50\n").unwrap_err();
        assert!(matches!(err, ZfError::ConfigParse { line: 1, .. }));
        let err = RunConfig::parse("loss.tau = fifty\n").unwrap_err();
        match err {
            ZfError::ConfigParse { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("loss.tau"));
            }
            other => panic!("{other:?}"),
        }
        let err = RunConfig::parse("a.b = 1\na.b = 2\n").unwrap_err();
        assert!(matches!(err, ZfError::ConfigParse { line: 2, .. }));
    }

    #[test]
    fn batch_multiplier_alias() {
        let cfg = RunConfig::parse("train.batch_multiplier = 5\n").unwrap();
        assert_eq!(cfg.loss_views_per_query, 5);
        let ok = RunConfig::parse("train.batch_multiplier = 4\nloss.views_per_query = 4\n").unwrap();
        assert_eq!(ok.loss_views_per_query, 4);
        assert!(RunConfig::parse("train.batch_multiplier = 4\nloss.views_per_query = 3\n").is_err());
    }

    #[test]
    fn validation_of_dependent_keys() {
        assert!(RunConfig::parse("train.init = pretrained-archive\n").is_err());
        assert!(RunConfig::parse("train.init = sideways\n").is_err());
        assert!(RunConfig::parse("encoder.kind = real-vlm\n").is_err());
        let ok = RunConfig::parse("train.init = pretrained-archive\ntrain.archive = /tmp/x\n");
        assert!(ok.is_ok());
    }

    #[test]
    fn builders_respect_plugin_registry() {
        let cfg = RunConfig::default();
        assert!(cfg.build_renderer().is_ok());
        let mut other = RunConfig::default();
        other.render_plugin = "neural".to_string();
        let err = other.build_renderer().unwrap_err();
        assert!(err.to_string().contains("built-in"));
    }

    #[test]
    fn condition_dim_follows_encoder_width() {
        let cfg = RunConfig::parse("encoder.embedding_width = 48\n").unwrap();
        assert_eq!(cfg.flow_config().condition_dim, 48);
    }
}
