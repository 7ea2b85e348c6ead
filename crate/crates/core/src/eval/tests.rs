use super::*;
use crate::encoders::{EmbeddingBatch, EncoderKind, EncoderSpec, ToyEncoder};
use crate::graph::{Graph, VarId};

fn hard_grid(n: usize, occupied: &[(usize, usize, usize)]) -> VoxelGrid {
    let mut data = vec![0.0; n * n * n];
    for &(x, y, z) in occupied {
        data[(x * n + y) * n + z] = 1.0;
    }
    VoxelGrid::new(Tensor::from_vec(vec![n, n, n], data), true).unwrap()
}

#[test]
fn iou_identity_disjoint_and_counting_oracle() {
    let a = hard_grid(4, &[(0, 0, 0), (1, 1, 1)]);
    let b = hard_grid(4, &[(2, 2, 2)]);
    // Identical non-empty grids.
    let m = pairwise_iou(
        &[a.clone(), a.clone()],
        &["x".to_string(), "y".to_string()],
    )
    .unwrap();
    assert_eq!(m.get(0, 1), 1.0);
    assert_eq!(m.get(0, 0), 1.0);

    // Disjoint grids.
    let m = pairwise_iou(&[a.clone(), b], &["x".to_string(), "y".to_string()]).unwrap();
    assert_eq!(m.get(0, 1), 0.0);

    // Set-counting oracle: A = 2 voxels, B shares exactly 1 and owns 1
    // other: |A and B| = 1, |A or B| = 3 -> 1/3.
    let c = hard_grid(4, &[(0, 0, 0), (3, 3, 3)]);
    let m = pairwise_iou(&[a, c], &["x".to_string(), "y".to_string()]).unwrap();
    assert!((m.get(0, 1) - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.get(0, 1), m.get(1, 0), "matrix is symmetric");
}

#[test]
fn iou_empty_pair_is_one_and_flagged() {
    let e = hard_grid(4, &[]);
    let m = pairwise_iou(
        &[e.clone(), e],
        &["a".to_string(), "b".to_string()],
    )
    .unwrap();
    assert_eq!(m.get(0, 1), 1.0);
    assert!(m.empty.iter().all(|&f| f));
    assert!(m.to_table().contains("(empty)"));
}

#[test]
fn iou_rejects_mixed_resolution_and_soft_grids() {
    let a = hard_grid(4, &[(0, 0, 0)]);
    let b = hard_grid(8, &[(0, 0, 0)]);
    assert!(matches!(
        pairwise_iou(&[a.clone(), b], &["a".to_string(), "b".to_string()]),
        Err(ZfError::Shape(_))
    ));
    let soft = VoxelGrid::new(Tensor::full(vec![4, 4, 4], 0.3), false).unwrap();
    assert!(matches!(
        pairwise_iou(&[a, soft], &["a".to_string(), "b".to_string()]),
        Err(ZfError::Contract(_))
    ));
}

/// Encoder test double whose image path projects the first H pixels of the
/// (pooled) image directly, so tests can construct images that embed onto
/// arbitrary unit vectors.
struct PlantedEncoder {
    spec: EncoderSpec,
    planted: Vec<Vec<f64>>, // per-plant embedding rows
    texts: Vec<Vec<f64>>,
}

impl PlantedEncoder {
    fn new(h: usize, planted: Vec<Vec<f64>>, texts: Vec<Vec<f64>>) -> Self {
        PlantedEncoder {
            spec: EncoderSpec {
                kind: EncoderKind::Toy,
                embedding_width: h,
                image_resolution: 8,
            },
            planted,
            texts,
        }
    }

    /// The image whose mean intensity selects planted row `i`.
    fn image_for(&self, i: usize) -> Tensor {
        Tensor::full(vec![3, 8, 8], (i as f64 + 1.0) / 16.0)
    }
}

impl VlmEncoder for PlantedEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode_text(&self, prompts: &[String]) -> Result<EmbeddingBatch> {
        let h = self.spec.embedding_width;
        let mut rows = Vec::with_capacity(prompts.len() * h);
        for p in prompts {
            let idx: usize = p
                .strip_prefix('q')
                .and_then(|s| s.parse().ok())
                .expect("planted prompts look like q<idx>");
            rows.extend_from_slice(&self.texts[idx]);
        }
        EmbeddingBatch::normalized(Tensor::from_vec(vec![prompts.len(), h], rows))
    }

    fn encode_image_vars(&self, graph: &mut Graph, images: VarId) -> Result<VarId> {
        let b = graph.value(images).shape()[0];
        let h = self.spec.embedding_width;
        // Select the planted row keyed by the image's mean intensity.
        let mut rows = Vec::with_capacity(b * h);
        for i in 0..b {
            let data = graph.value(images).data();
            let per = 3 * 8 * 8;
            let mean: f64 = data[i * per..(i + 1) * per].iter().sum::<f64>() / per as f64;
            let idx = ((mean * 16.0).round() as usize).saturating_sub(1);
            rows.extend_from_slice(&self.planted[idx]);
        }
        Ok(graph.constant(Tensor::from_vec(vec![b, h], rows)))
    }

    fn param_checksum(&self) -> u64 {
        0
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn r_precision_singleton_is_one() {
    let texts = vec![unit(vec![1.0, 0.0, 0.0, 0.0])];
    let enc = PlantedEncoder::new(4, texts.clone(), texts);
    let queries = QuerySet::new(vec!["q0".into()]).unwrap();
    let renders = vec![vec![enc.image_for(0)]];
    assert_eq!(r_precision(&renders, &queries, &enc).unwrap(), 1.0);
}

/// Construction oracle: image embeddings planted exactly on their own text
/// embeddings retrieve perfectly.
#[test]
fn r_precision_planted_identity_is_one() {
    let texts: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        })
        .collect();
    let enc = PlantedEncoder::new(4, texts.clone(), texts);
    let queries = QuerySet::new((0..4).map(|i| format!("q{i}")).collect()).unwrap();
    let renders: Vec<Vec<Tensor>> = (0..4).map(|i| vec![enc.image_for(i)]).collect();
    assert_eq!(r_precision(&renders, &queries, &enc).unwrap(), 1.0);

    // Forced choice under the same construction is also perfect.
    let mut rng = Rng::new(1);
    assert_eq!(forced_choice(&renders, &queries, &enc, &mut rng).unwrap(), 1.0);
}

/// Chance-level oracle: random unit image embeddings retrieve at 1/Q and
/// force-choose at 1/2, within 3-sigma binomial bands.
#[test]
fn chance_level_monte_carlo() {
    let q = 10usize;
    let h = 16usize;
    let trials = 400usize; // q * trials retrieval decisions
    let mut rng = Rng::new(42);
    let texts: Vec<Vec<f64>> = (0..q)
        .map(|_| unit((0..h).map(|_| rng.next_normal()).collect()))
        .collect();
    let mut rp_acc = 0.0;
    let mut fc_acc = 0.0;
    let mut fc_n = 0.0;
    for _ in 0..trials {
        let planted: Vec<Vec<f64>> = (0..q)
            .map(|_| unit((0..h).map(|_| rng.next_normal()).collect()))
            .collect();
        let enc = PlantedEncoder::new(h, planted, texts.clone());
        let queries = QuerySet::new((0..q).map(|i| format!("q{i}")).collect()).unwrap();
        let renders: Vec<Vec<Tensor>> = (0..q).map(|i| vec![enc.image_for(i)]).collect();
        rp_acc += r_precision(&renders, &queries, &enc).unwrap() * q as f64;
        let mut tie_rng = Rng::new(7);
        fc_acc += forced_choice(&renders, &queries, &enc, &mut tie_rng).unwrap()
            * (q * (q - 1)) as f64;
        fc_n += (q * (q - 1)) as f64;
    }
    let n_rp = (trials * q) as f64;
    let rp = rp_acc / n_rp;
    let p = 1.0 / q as f64;
    let band_rp = 3.0 * (p * (1.0 - p) / n_rp).sqrt();
    assert!(
        (rp - p).abs() < band_rp,
        "r_precision {rp} outside {p} +/- {band_rp}"
    );

    // Forced-choice decisions are positively correlated within a trial
    // (shared embeddings), so allow a generous factor over the i.i.d. band.
    let fc = fc_acc / fc_n;
    let band_fc = 3.0 * (0.25 / fc_n).sqrt() * 4.0;
    assert!(
        (fc - 0.5).abs() < band_fc,
        "forced choice {fc} outside 0.5 +/- {band_fc}"
    );
}

/// Degenerate pair: identical renders for query and distractor tie, and
/// random tie-breaking converges to 0.5.
#[test]
fn forced_choice_tie_splits_at_half() {
    let h = 4;
    let texts = vec![unit(vec![1.0, 0.2, 0.0, 0.0]), unit(vec![0.0, 1.0, 0.3, 0.0])];
    // Both queries render to the same planted embedding -> all pairs tie.
    let shared = unit(vec![0.5, 0.5, 0.5, 0.5]);
    let enc = PlantedEncoder::new(h, vec![shared.clone(), shared], texts);
    let queries = QuerySet::new(vec!["q0".into(), "q1".into()]).unwrap();
    let renders: Vec<Vec<Tensor>> = (0..2).map(|i| vec![enc.image_for(i)]).collect();
    let trials = 4000;
    let mut acc = 0.0;
    for t in 0..trials {
        let mut rng = Rng::new(t);
        acc += forced_choice(&renders, &queries, &enc, &mut rng).unwrap();
    }
    let mean = acc / trials as f64;
    // 2 decisions per call; 3-sigma band for 2*trials fair coin flips.
    let band = 3.0 * (0.25 / (2.0 * trials as f64)).sqrt();
    assert!((mean - 0.5).abs() < band, "tie split {mean} outside 0.5 +/- {band}");
}

#[test]
fn forced_choice_needs_two_queries() {
    let texts = vec![unit(vec![1.0, 0.0])];
    let enc = PlantedEncoder::new(2, texts.clone(), texts);
    let queries = QuerySet::new(vec!["q0".into()]).unwrap();
    let renders = vec![vec![enc.image_for(0)]];
    let mut rng = Rng::new(0);
    assert!(matches!(
        forced_choice(&renders, &queries, &enc, &mut rng),
        Err(ZfError::Config(_))
    ));
}

/// Scale invariance: metrics depend only on normalized embeddings, so a
/// common pre-normalization rescaling cannot change them.
#[test]
fn metrics_invariant_to_common_rescaling() {
    // The toy encoder normalizes embeddings; feeding images scaled by a
    // constant factor changes only pre-normalization magnitudes.
    let enc = ToyEncoder::new(3, 8, 16).unwrap();
    let queries = QuerySet::new(vec!["left".into(), "right".into()]).unwrap();
    let mk = |scale: f64| -> Vec<Vec<Tensor>> {
        (0..2)
            .map(|i| {
                vec![Tensor::from_vec(
                    vec![3, 16, 16],
                    (0..3 * 16 * 16)
                        .map(|k| scale * (((k + i * 37) % 11) as f64) / 11.0)
                        .collect(),
                )]
            })
            .collect()
    };
    let a = r_precision(&mk(1.0), &queries, &enc).unwrap();
    let b = r_precision(&mk(0.25), &queries, &enc).unwrap();
    assert_eq!(a, b);
}

/// Total collapse to emptiness surfaces in the report instead of aborting
/// it: empty flags set, matched similarity zero, metrics still emitted.
#[test]
fn evaluate_grids_survives_total_emptiness() {
    let enc = ToyEncoder::new(0, 16, 16).unwrap();
    let queries = QuerySet::new(vec!["a".into(), "b".into()]).unwrap();
    let empty = VoxelGrid::new(Tensor::zeros(vec![8, 8, 8]), true).unwrap();
    let (report, iou) =
        evaluate_grids(&[empty.clone(), empty], &queries, &enc, 0).unwrap();
    assert!(report.per_query.iter().all(|p| p.empty));
    assert_eq!(report.r_precision, 0.0, "zero embeddings lose every comparison");
    assert_eq!(report.mean_offdiag_iou, 1.0, "empty-vs-empty IoU is 1, flagged");
    assert!(iou.empty.iter().all(|&f| f));
}

#[test]
fn evaluate_run_round_trip() {
    use crate::binarization::BinarizationParams;
    use crate::generator::{DecoderConfig, FlowConfig};
    use crate::objectives::ObjectiveParams;
    use crate::render::{BuiltinRenderer, RenderConfig};
    use crate::trainer::{train, TrainConfig, TrainSetup};

    let encoder = ToyEncoder::new(0, 16, 24).unwrap();
    let renderer = BuiltinRenderer::new(RenderConfig {
        image_size: 24,
        ..RenderConfig::default()
    });
    let dir = tempfile::tempdir().unwrap();
    let setup = TrainSetup {
        train: TrainConfig {
            iterations: 4,
            lr: 1e-3,
            batch_multiplier: 2,
            seed: 5,
            checkpoint_every: 2,
            ..TrainConfig::default()
        },
        flow: FlowConfig {
            num_coupling_blocks: 2,
            hidden_width: 16,
            latent_dim: 8,
            condition_dim: 16,
        },
        decoder: DecoderConfig {
            num_blocks: 2,
            resolution: 16,
            base_channels: 8,
            zeroconv_enabled: false,
        },
        binarize: BinarizationParams::default(),
        objective: ObjectiveParams::default(),
        queries: QuerySet::new(vec!["cube".into(), "rod".into()]).unwrap(),
        encoder: &encoder,
        renderer: &renderer,
        out_dir: dir.path().to_path_buf(),
        config_snapshot: String::new(),
    };
    train(&setup).unwrap();

    let (report, iou) = evaluate_run(dir.path(), &encoder, 3).unwrap();
    report.validate().unwrap();
    assert_eq!(iou.len(), 2);
    assert_eq!(report.per_query.len(), 2);
    // Determinism given the seed.
    let (report2, _) = evaluate_run(dir.path(), &encoder, 3).unwrap();
    assert_eq!(report.r_precision, report2.r_precision);
    assert_eq!(report.forced_choice_accuracy, report2.forced_choice_accuracy);
    assert_eq!(report.mean_offdiag_iou, report2.mean_offdiag_iou);

    // Missing checkpoint dir is an error.
    let empty = tempfile::tempdir().unwrap();
    std::fs::write(empty.path().join("queries.txt"), "a\n").unwrap();
    assert!(matches!(
        evaluate_run(empty.path(), &encoder, 0),
        Err(ZfError::Config(_))
    ));
}
