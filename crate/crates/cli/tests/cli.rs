//! End-to-end tests of the command-line surface, driving the built binary.

use std::path::Path;
use std::process::{Command, Output};

use zeroforge::binarization::binarize_hard;
use zeroforge::trainer::RunRecord;
use zeroforge::voxfile::read_voxel_file;

fn zeroforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zeroforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

const SMOKE_CONFIG: &str = "\
encoder.kind = toy
encoder.embedding_width = 16
encoder.image_resolution = 24
flow.num_coupling_blocks = 2
flow.hidden_width = 16
flow.latent_dim = 8
decoder.num_blocks = 2
decoder.resolution = 16
decoder.base_channels = 8
render.image_size = 24
loss.views_per_query = 2
train.iterations = 4
train.lr = 0.001
train.checkpoint_every = 2
train.seed = 9
";

fn write_smoke_inputs(dir: &Path) -> (String, String) {
    let config = dir.join("config.txt");
    let queries = dir.join("queries.txt");
    std::fs::write(&config, SMOKE_CONFIG).unwrap();
    std::fs::write(&queries, "chair\nspoon\n").unwrap();
    (
        config.to_string_lossy().into_owned(),
        queries.to_string_lossy().into_owned(),
    )
}

fn read_log_losses(run_dir: &Path) -> Vec<f64> {
    std::fs::read_to_string(run_dir.join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<RunRecord>(l).unwrap().loss.total)
        .collect()
}

#[test]
fn train_smoke_and_seeded_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let (config, queries) = write_smoke_inputs(dir.path());
    let out_a = dir.path().join("run-a");
    let out_b = dir.path().join("run-b");

    let out = zeroforge(&[
        "train",
        "--config",
        &config,
        "--queries",
        &queries,
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_a.join("checkpoints/iter-0").exists());
    assert!(out_a.join("checkpoints/iter-4").exists());
    assert!(out_a.join("config.snapshot").exists());

    let out = zeroforge(&[
        "train",
        "--config",
        &config,
        "--queries",
        &queries,
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let (losses_a, losses_b) = (read_log_losses(&out_a), read_log_losses(&out_b));
    assert_eq!(losses_a.len(), 4);
    for (a, b) in losses_a.iter().zip(&losses_b) {
        assert!((a - b).abs() < 1e-9, "seeded rerun diverged: {a} vs {b}");
    }
}

#[test]
fn misspelled_config_key_fails_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.txt");
    std::fs::write(&config, "loss.lamda_c = 0.01\n").unwrap();
    let queries = dir.path().join("q.txt");
    std::fs::write(&queries, "chair\n").unwrap();
    let out = zeroforge(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--queries",
        queries.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("loss.lamda_c"), "stderr: {stderr}");
}

#[test]
fn generate_round_trips_and_matches_export_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (config, queries) = write_smoke_inputs(dir.path());
    let run = dir.path().join("run");
    assert!(zeroforge(&[
        "train",
        "--config",
        &config,
        "--queries",
        &queries,
        "--out",
        run.to_str().unwrap(),
    ])
    .status
    .success());
    let ckpt = run.join("checkpoints/iter-4");

    let hard_path = dir.path().join("chair.zfvox");
    let soft_path = dir.path().join("chair-soft.zfvox");
    let preview = dir.path().join("chair.png");
    let out = zeroforge(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--prompt",
        "chair",
        "--out",
        hard_path.to_str().unwrap(),
        "--preview",
        preview.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(zeroforge(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--prompt",
        "chair",
        "--out",
        soft_path.to_str().unwrap(),
        "--soft",
    ])
    .status
    .success());

    // Round trip: the file reads back exactly.
    let hard = read_voxel_file(&hard_path).unwrap();
    assert!(hard.binarized());
    assert_eq!(hard.resolution(), 16);

    // Export contract: the u8 export equals binarize_hard of the soft grid
    // at the checkpoint's gamma (0.05 default).
    let soft = read_voxel_file(&soft_path).unwrap();
    let rebinarized = binarize_hard(&soft, 0.05);
    assert_eq!(hard.values().data(), rebinarized.values().data());

    // Determinism: generating again yields a byte-identical file.
    let again = dir.path().join("chair2.zfvox");
    assert!(zeroforge(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--prompt",
        "chair",
        "--out",
        again.to_str().unwrap(),
    ])
    .status
    .success());
    assert_eq!(
        std::fs::read(&hard_path).unwrap(),
        std::fs::read(&again).unwrap()
    );

    // Preview: a fixed-pose render written by the library path is
    // byte-identical to the CLI's.
    assert!(preview.exists());
    let (generator, meta) = zeroforge::checkpoint::load_checkpoint(&ckpt).unwrap();
    let cfg = zeroforge::config::RunConfig::parse(&meta.config_snapshot).unwrap();
    let encoder = cfg.build_encoder().unwrap();
    let grid = zeroforge::trainer::generate_with(
        &generator,
        meta.binarize.gamma,
        "chair",
        zeroforge::generator::NoiseMode::Zero,
        0,
        encoder.as_ref(),
    )
    .unwrap();
    let pose = zeroforge::render::CameraPose::new(
        std::f64::consts::FRAC_PI_4,
        std::f64::consts::FRAC_PI_3,
    )
    .unwrap();
    let img = zeroforge::render::render(&grid, &pose, &cfg.render_config()).unwrap();
    let lib_png = dir.path().join("lib.png");
    zeroforge::render::write_png(&lib_png, &img).unwrap();
    assert_eq!(
        std::fs::read(&preview).unwrap(),
        std::fs::read(&lib_png).unwrap()
    );
}

#[test]
fn generate_resolution_flag_resamples() {
    let dir = tempfile::tempdir().unwrap();
    let (config, queries) = write_smoke_inputs(dir.path());
    let run = dir.path().join("run");
    assert!(zeroforge(&[
        "train",
        "--config",
        &config,
        "--queries",
        &queries,
        "--out",
        run.to_str().unwrap(),
    ])
    .status
    .success());
    let out_path = dir.path().join("r32.zfvox");
    let out = zeroforge(&[
        "generate",
        "--checkpoint",
        run.join("checkpoints/iter-4").to_str().unwrap(),
        "--prompt",
        "chair",
        "--out",
        out_path.to_str().unwrap(),
        "--resolution",
        "32",
        "--soft",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let grid = read_voxel_file(&out_path).unwrap();
    assert_eq!(grid.resolution(), 32);
}

#[test]
fn eval_writes_report_and_iou_table() {
    let dir = tempfile::tempdir().unwrap();
    let (config, queries) = write_smoke_inputs(dir.path());
    let run = dir.path().join("run");
    assert!(zeroforge(&[
        "train",
        "--config",
        &config,
        "--queries",
        &queries,
        "--out",
        run.to_str().unwrap(),
    ])
    .status
    .success());

    let report_path = dir.path().join("report.json");
    let out = zeroforge(&[
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report: zeroforge::eval::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&report.r_precision));
    assert!((0.0..=1.0).contains(&report.forced_choice_accuracy));
    assert_eq!(report.per_query.len(), 2);
    let table = std::fs::read_to_string(dir.path().join("report.json.iou.txt")).unwrap();
    assert!(table.contains("chair") && table.contains("spoon"));

    // The report's mean off-diagonal IoU is recomputable from the emitted
    // plain-text table.
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in table.lines().skip(1) {
        let nums: Vec<f64> = line
            .split_whitespace()
            .filter_map(|t| t.parse::<f64>().ok())
            .collect();
        if !nums.is_empty() {
            rows.push(nums);
        }
    }
    assert_eq!(rows.len(), 2);
    let recomputed = (rows[0][1] + rows[1][0]) / 2.0;
    assert!(
        (recomputed - report.mean_offdiag_iou).abs() < 1e-4,
        "table {recomputed} vs report {}",
        report.mean_offdiag_iou
    );

    // Empty run dir fails.
    let empty = dir.path().join("empty-run");
    std::fs::create_dir_all(&empty).unwrap();
    std::fs::write(empty.join("queries.txt"), "chair\n").unwrap();
    let out = zeroforge(&[
        "eval",
        "--run",
        empty.to_str().unwrap(),
        "--out",
        dir.path().join("r2.json").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn eval_single_query_reports_perfect_retrieval() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.txt");
    std::fs::write(&config, SMOKE_CONFIG).unwrap();
    let queries = dir.path().join("queries.txt");
    std::fs::write(&queries, "mug\n").unwrap();
    let run = dir.path().join("run");
    assert!(zeroforge(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--queries",
        queries.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ])
    .status
    .success());
    let report_path = dir.path().join("report.json");
    assert!(zeroforge(&[
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ])
    .status
    .success());
    let report: zeroforge::eval::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.r_precision, 1.0);
}

#[test]
fn export_converts_and_rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let (config, queries) = write_smoke_inputs(dir.path());
    let run = dir.path().join("run");
    assert!(zeroforge(&[
        "train",
        "--config",
        &config,
        "--queries",
        &queries,
        "--out",
        run.to_str().unwrap(),
    ])
    .status
    .success());
    let soft_path = dir.path().join("soft.zfvox");
    assert!(zeroforge(&[
        "generate",
        "--checkpoint",
        run.join("checkpoints/iter-4").to_str().unwrap(),
        "--prompt",
        "chair",
        "--out",
        soft_path.to_str().unwrap(),
        "--soft",
    ])
    .status
    .success());

    // Binarize-on-export matches the library function.
    let bin_path = dir.path().join("bin.zfvox");
    let out = zeroforge(&[
        "export",
        "--input",
        soft_path.to_str().unwrap(),
        "--out",
        bin_path.to_str().unwrap(),
        "--binarize",
        "0.05",
        "--preview",
        dir.path().join("p.png").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let soft = read_voxel_file(&soft_path).unwrap();
    let exported = read_voxel_file(&bin_path).unwrap();
    assert_eq!(
        exported.values().data(),
        binarize_hard(&soft, 0.05).values().data()
    );

    // Corrupt magic: nonzero exit naming the file.
    let mut bytes = std::fs::read(&soft_path).unwrap();
    bytes[0] = b'X';
    let bad = dir.path().join("bad.zfvox");
    std::fs::write(&bad, bytes).unwrap();
    let out = zeroforge(&["export", "--input", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.zfvox"), "stderr: {stderr}");
}

#[test]
fn checkpoint_dir_env_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let (config, queries) = write_smoke_inputs(dir.path());
    let run = dir.path().join("run");
    assert!(zeroforge(&[
        "train",
        "--config",
        &config,
        "--queries",
        &queries,
        "--out",
        run.to_str().unwrap(),
    ])
    .status
    .success());
    let out_path = dir.path().join("g.zfvox");
    let out = Command::new(env!("CARGO_BIN_EXE_zeroforge"))
        .env("ZEROFORGE_CHECKPOINT_DIR", run.join("checkpoints"))
        .args([
            "generate",
            "--checkpoint",
            "iter-4",
            "--prompt",
            "chair",
            "--out",
            out_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_path.exists());
}
