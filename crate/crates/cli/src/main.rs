//! Command-line interface: `train`, `generate`, `eval`, `export`.
//!
//! Global flags: `--config` (flat key-value file) and `--seed` (overrides
//! the configured seed). When a checkpoint or run path does not exist as
//! given, it is retried relative to `$ZEROFORGE_CHECKPOINT_DIR`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use zeroforge::binarization::binarize_hard;
use zeroforge::checkpoint::load_checkpoint;
use zeroforge::config::RunConfig;
use zeroforge::error::{Result, ZfError};
use zeroforge::eval::evaluate_run;
use zeroforge::generator::NoiseMode;
use zeroforge::render::{render, write_png, CameraPose};
use zeroforge::trainer::{train, generate_soft, QuerySet, TrainSetup};
use zeroforge::voxfile::{read_voxel_file, write_voxel_file, VoxelDtype};

/// Documented preview pose: azimuth pi/4, polar pi/3.
const PREVIEW_AZIMUTH: f64 = std::f64::consts::FRAC_PI_4;
const PREVIEW_POLAR: f64 = std::f64::consts::FRAC_PI_3;

const CHECKPOINT_DIR_ENV: &str = "ZEROFORGE_CHECKPOINT_DIR";

#[derive(Parser)]
#[command(name = "zeroforge", version, about = "Zero-shot text-to-shape generation")]
struct Cli {
    /// Run configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Zero,
    Gaussian,
}

impl From<NoiseArg> for NoiseMode {
    fn from(v: NoiseArg) -> Self {
        match v {
            NoiseArg::Zero => NoiseMode::Zero,
            NoiseArg::Gaussian => NoiseMode::Gaussian,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Adapt a generator to a query set and write a run directory.
    Train {
        /// Prompt file: one prompt per line, UTF-8.
        #[arg(long)]
        queries: PathBuf,
        /// Run directory to create/populate.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a voxel grid from a checkpoint for one prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Output voxel file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "zero")]
        noise: NoiseArg,
        /// Resample the soft occupancies to this grid resolution before
        /// binarization/export (default: the decoder's native resolution).
        #[arg(long)]
        resolution: Option<usize>,
        /// Export the raw soft occupancies (f32) instead of the
        /// hard-binarized grid (u8).
        #[arg(long)]
        soft: bool,
        /// Also render a PNG preview at the documented fixed pose.
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Score a finished run directory and write a report.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Report output path (JSON); the IoU table lands next to it
        /// with an `.iou.txt` suffix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert or preview an existing voxel file.
    Export {
        #[arg(long)]
        input: PathBuf,
        /// Write a converted copy (binarized grids export as u8, soft
        /// grids as f32).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Hard-binarize at this threshold before exporting.
        #[arg(long)]
        binarize: Option<f64>,
        /// Render a PNG preview.
        #[arg(long)]
        preview: Option<PathBuf>,
        /// Preview azimuth in radians.
        #[arg(long, default_value_t = PREVIEW_AZIMUTH)]
        azimuth: f64,
        /// Preview polar angle in radians.
        #[arg(long, default_value_t = PREVIEW_POLAR)]
        polar: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Retry non-existent paths relative to the default checkpoint directory.
fn resolve_path(path: &Path) -> PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    if let Ok(base) = std::env::var(CHECKPOINT_DIR_ENV) {
        let candidate = Path::new(&base).join(path);
        if candidate.exists() {
            return candidate;
        }
    }
    path.to_path_buf()
}

/// Load the run configuration: explicit `--config` wins, otherwise the
/// text embedded in the checkpoint/run snapshot.
fn config_from(cli_config: &Option<PathBuf>, embedded: Option<&str>) -> Result<RunConfig> {
    match cli_config {
        Some(path) => RunConfig::from_file(path),
        None => match embedded {
            Some(text) => RunConfig::parse(text),
            None => Ok(RunConfig::default()),
        },
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { queries, out } => {
            let config_path = cli.config.as_ref().ok_or_else(|| {
                ZfError::Config("train requires --config <file>".into())
            })?;
            let mut config = RunConfig::from_file(config_path)?;
            if let Some(seed) = cli.seed {
                config.train_seed = seed;
            }
            let queries_text = std::fs::read_to_string(&queries)?;
            let query_set = QuerySet::from_text(&queries_text)?;
            let encoder = config.build_encoder()?;
            let renderer = config.build_renderer()?;
            let setup = TrainSetup {
                train: config.train_config()?,
                flow: config.flow_config(),
                decoder: config.decoder_config(),
                binarize: config.binarize_params(),
                objective: config.objective_params(),
                queries: query_set,
                encoder: encoder.as_ref(),
                renderer: &renderer,
                out_dir: out.clone(),
                config_snapshot: config.snapshot_text(),
            };
            let outcome = train(&setup)?;
            let last = outcome.records.last().expect("at least one iteration");
            println!(
                "trained {} iterations; final loss {:.6} (sim {:.6}, contrast {:.6})",
                last.iteration, last.loss.total, last.loss.sim, last.loss.contrast
            );
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            Ok(())
        }

        Command::Generate {
            checkpoint,
            prompt,
            out,
            noise,
            resolution,
            soft,
            preview,
        } => {
            let checkpoint = resolve_path(&checkpoint);
            let (generator, meta) = load_checkpoint(&checkpoint)?;
            let config = config_from(&cli.config, Some(&meta.config_snapshot))?;
            let encoder = config.build_encoder()?;
            let seed = cli.seed.unwrap_or(0);
            let mut soft_grid =
                generate_soft(&generator, &prompt, noise.into(), seed, encoder.as_ref())?;
            if let Some(target) = resolution {
                soft_grid = soft_grid.resample(target)?;
            }
            let (grid, dtype) = if soft {
                (soft_grid.clone(), VoxelDtype::F32Soft)
            } else {
                (binarize_hard(&soft_grid, meta.binarize.gamma), VoxelDtype::U8Binary)
            };
            write_voxel_file(&out, &grid, dtype)?;
            println!(
                "wrote {} ({} voxels occupied of {})",
                out.display(),
                if grid.binarized() {
                    grid.occupied_count()
                } else {
                    grid.values().data().iter().filter(|&&v| v > meta.binarize.gamma).count()
                },
                grid.values().numel()
            );
            if let Some(preview_path) = preview {
                let pose = CameraPose::new(PREVIEW_AZIMUTH, PREVIEW_POLAR)?;
                let image = render(&grid, &pose, &config.render_config())?;
                write_png(&preview_path, &image)?;
                println!("wrote preview {}", preview_path.display());
            }
            Ok(())
        }

        Command::Eval { run, out } => {
            let run = resolve_path(&run);
            let snapshot = std::fs::read_to_string(run.join("config.snapshot")).ok();
            let config = config_from(&cli.config, snapshot.as_deref())?;
            let encoder = config.build_encoder()?;
            let seed = cli.seed.unwrap_or(config.train_seed);
            let (report, iou) = evaluate_run(&run, encoder.as_ref(), seed)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| ZfError::Config(format!("report serialization failed: {e}")))?;
            std::fs::write(&out, json)?;
            let table_path = out.with_extension(
                out.extension()
                    .map(|e| format!("{}.iou.txt", e.to_string_lossy()))
                    .unwrap_or_else(|| "iou.txt".to_string()),
            );
            std::fs::write(&table_path, iou.to_table())?;
            println!(
                "r_precision {:.4}  forced_choice {:.4}  mean_offdiag_iou {:.4}",
                report.r_precision, report.forced_choice_accuracy, report.mean_offdiag_iou
            );
            println!("wrote {} and {}", out.display(), table_path.display());
            Ok(())
        }

        Command::Export {
            input,
            out,
            binarize,
            preview,
            azimuth,
            polar,
        } => {
            let mut grid = read_voxel_file(&resolve_path(&input))?;
            if let Some(gamma) = binarize {
                grid = binarize_hard(&grid, gamma);
            }
            if let Some(out) = out {
                let dtype = if grid.binarized() {
                    VoxelDtype::U8Binary
                } else {
                    VoxelDtype::F32Soft
                };
                write_voxel_file(&out, &grid, dtype)?;
                println!("wrote {}", out.display());
            }
            if let Some(preview_path) = preview {
                let pose = CameraPose::new(azimuth, polar)?;
                let cfg = config_from(&cli.config, None)?.render_config();
                let image = render(&grid, &pose, &cfg)?;
                write_png(&preview_path, &image)?;
                println!("wrote preview {}", preview_path.display());
            }
            Ok(())
        }
    }
}
