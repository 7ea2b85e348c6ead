use super::*;
use crate::graph::Graph;
use crate::rng::Rng;
use crate::tensor::Tensor;

fn random_normalized(b: usize, h: usize, seed: u64) -> EmbeddingBatch {
    let mut rng = Rng::stream(seed, "objective-test", 0);
    let mut graph = Graph::new();
    let raw = graph.leaf(Tensor::randn(vec![b, h], 1.0, &mut rng));
    let out = graph.l2_normalize_rows(raw);
    EmbeddingBatch::normalized(graph.value(out).clone()).unwrap()
}

fn identical_rows(b: usize, h: usize) -> EmbeddingBatch {
    let one = random_normalized(1, h, 99);
    let mut data = Vec::with_capacity(b * h);
    for _ in 0..b {
        data.extend_from_slice(one.row(0));
    }
    EmbeddingBatch::normalized(Tensor::from_vec(vec![b, h], data)).unwrap()
}

#[test]
fn similarity_matched_identical_is_minus_one() {
    let batch = random_normalized(4, 8, 1);
    let loss = similarity_loss(&batch, &batch).unwrap();
    assert!((loss - (-1.0)).abs() < 1e-12);
}

#[test]
fn similarity_orthogonal_is_zero() {
    // Use one-hot rows: images on even axes, texts on odd axes.
    let mut iv = vec![0.0; 3 * 8];
    let mut tv = vec![0.0; 3 * 8];
    for i in 0..3 {
        iv[i * 8 + 2 * i] = 1.0;
        tv[i * 8 + 2 * i + 1] = 1.0;
    }
    let images = EmbeddingBatch::normalized(Tensor::from_vec(vec![3, 8], iv)).unwrap();
    let texts = EmbeddingBatch::normalized(Tensor::from_vec(vec![3, 8], tv)).unwrap();
    assert_eq!(similarity_loss(&images, &texts).unwrap(), 0.0);
}

/// Oracle: brute-force mean of matched dot products.
#[test]
fn similarity_matches_brute_force() {
    let images = random_normalized(5, 16, 2);
    let texts = random_normalized(5, 16, 3);
    let loss = similarity_loss(&images, &texts).unwrap();
    let mut acc = 0.0;
    for i in 0..5 {
        let mut dot = 0.0;
        for k in 0..16 {
            dot += images.row(i)[k] * texts.row(i)[k];
        }
        acc += dot;
    }
    let brute = -acc / 5.0;
    assert!((loss - brute).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&loss));
}

#[test]
fn similarity_rejects_unnormalized() {
    let raw = EmbeddingBatch::raw(Tensor::from_vec(vec![1, 2], vec![3.0, 4.0])).unwrap();
    let ok = random_normalized(1, 2, 4);
    assert!(matches!(
        similarity_loss(&raw, &ok),
        Err(ZfError::Contract(_))
    ));
}

#[test]
fn contrastive_single_item_is_zero() {
    let b = random_normalized(1, 8, 5);
    assert_eq!(contrastive_loss(&b, &b, 50.0).unwrap(), 0.0);
}

/// Oracle: all-identical embeddings give a uniform softmax over 4 -> log 4.
#[test]
fn contrastive_identical_batch_is_log4() {
    let batch = identical_rows(4, 8);
    let loss = contrastive_loss(&batch, &batch, 50.0).unwrap();
    assert!((loss - 4.0f64.ln()).abs() < 1e-9, "loss {loss}");
    assert!((4.0f64.ln() - 1.386294).abs() < 1e-6);
}

/// Oracle: direct log-softmax evaluation of the printed denominator
/// direction (softmax over images j for each text i).
#[test]
fn contrastive_matches_brute_force() {
    let images = random_normalized(6, 12, 6);
    let texts = random_normalized(6, 12, 7);
    let tau = 50.0;
    let loss = contrastive_loss(&images, &texts, tau).unwrap();

    let mut brute = 0.0;
    for i in 0..6 {
        let mut denom = 0.0;
        for j in 0..6 {
            denom += (tau * images.dot(j, &texts, i)).exp();
        }
        let num = (tau * images.dot(i, &texts, i)).exp();
        brute -= (num / denom).ln();
    }
    brute /= 6.0;
    assert!((loss - brute).abs() < 1e-9, "{loss} vs {brute}");
    assert!(loss >= 0.0);
}

#[test]
fn contrastive_rejects_bad_tau() {
    let b = random_normalized(2, 8, 8);
    assert!(matches!(
        contrastive_loss(&b, &b, 0.0),
        Err(ZfError::Parameter(_))
    ));
    assert!(matches!(
        contrastive_loss(&b, &b, -1.0),
        Err(ZfError::Parameter(_))
    ));
}

#[test]
fn total_loss_identity_and_tagged_value() {
    // lambda_c = 0: total equals sim.
    let images = random_normalized(4, 8, 9);
    let texts = random_normalized(4, 8, 10);
    let p0 = ObjectiveParams { lambda_c: 0.0, tau: 50.0 };
    let b0 = total_loss(&images, &texts, &p0).unwrap();
    assert_eq!(b0.total, b0.sim);

    // sim = -1 and contrast = log 4 at lambda_c = 0.01:
    // total = -1 + 0.01 * 1.386294... = -0.986137...
    let batch = identical_rows(4, 8);
    let p = ObjectiveParams { lambda_c: 0.01, tau: 50.0 };
    let b = total_loss(&batch, &batch, &p).unwrap();
    assert!((b.sim - (-1.0)).abs() < 1e-12);
    assert!((b.contrast - 4.0f64.ln()).abs() < 1e-9);
    assert!((b.total - (-1.0 + 0.01 * 4.0f64.ln())).abs() < 1e-12);
    assert!((b.total - (-0.986137)).abs() < 1e-6);
    // Exact identity by construction.
    assert_eq!(b.total, b.sim + p.lambda_c * b.contrast);
}

#[test]
fn multiview_total_is_mean_of_view_totals() {
    let params = ObjectiveParams { lambda_c: 0.05, tau: 30.0 };
    let views: Vec<(EmbeddingBatch, EmbeddingBatch)> = (0..3)
        .map(|v| (random_normalized(4, 8, 20 + v), random_normalized(4, 8, 30 + v)))
        .collect();
    let combined = total_loss_multiview(&views, &params).unwrap();
    let mean_total: f64 = views
        .iter()
        .map(|(i, t)| total_loss(i, t, &params).unwrap().total)
        .sum::<f64>()
        / 3.0;
    assert!((combined.total - mean_total).abs() < 1e-12);
    assert_eq!(combined.per_query_sim.len(), 4);
}

#[test]
fn permutation_equivariance() {
    let images = random_normalized(5, 8, 40);
    let texts = random_normalized(5, 8, 41);
    let perm = [3usize, 0, 4, 1, 2];
    let permute = |b: &EmbeddingBatch| {
        let mut data = Vec::with_capacity(5 * 8);
        for &i in &perm {
            data.extend_from_slice(b.row(i));
        }
        EmbeddingBatch::normalized(Tensor::from_vec(vec![5, 8], data)).unwrap()
    };
    let (pi, pt) = (permute(&images), permute(&texts));
    let s1 = similarity_loss(&images, &texts).unwrap();
    let s2 = similarity_loss(&pi, &pt).unwrap();
    assert!((s1 - s2).abs() < 1e-12);
    let c1 = contrastive_loss(&images, &texts, 50.0).unwrap();
    let c2 = contrastive_loss(&pi, &pt, 50.0).unwrap();
    assert!((c1 - c2).abs() < 1e-12);
}

#[test]
fn raising_mismatched_similarity_raises_contrastive_loss() {
    let images = random_normalized(4, 8, 50);
    let texts = random_normalized(4, 8, 51);
    let tau = 10.0;
    let base = contrastive_loss(&images, &texts, tau).unwrap();
    // Nudge image 2 toward text 0 (a non-matching pair), renormalize.
    let mut data = images.vectors().data().to_vec();
    for k in 0..8 {
        data[2 * 8 + k] += 0.2 * texts.row(0)[k];
    }
    let norm: f64 = data[16..24].iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in data[16..24].iter_mut() {
        *v /= norm;
    }
    let moved = EmbeddingBatch::normalized(Tensor::from_vec(vec![4, 8], data)).unwrap();
    // Verify the construction actually raised <I_2, T_0>.
    assert!(moved.dot(2, &texts, 0) > images.dot(2, &texts, 0));
    let bumped = contrastive_loss(&moved, &texts, tau).unwrap();
    assert!(
        bumped > base,
        "raising a mismatched similarity must increase the loss ({base} -> {bumped})"
    );
}

/// Gradient direction: d(similarity)/dI_i = -T_i / B for fixed (already
/// normalized) image rows, checked against finite differences.
#[test]
fn similarity_gradient_direction() {
    let images = random_normalized(3, 6, 60);
    let texts = random_normalized(3, 6, 61);
    let mut graph = Graph::new();
    let iv = graph.leaf(images.vectors().clone());
    let tv = graph.constant(texts.vectors().clone());
    let (loss, _) = similarity_loss_vars(&mut graph, iv, tv);
    let grads = graph.backward(loss);
    let gi = grads.get(iv).unwrap();
    for i in 0..3 {
        for k in 0..6 {
            let expected = -texts.row(i)[k] / 3.0;
            assert!((gi.data()[i * 6 + k] - expected).abs() < 1e-12);
        }
    }

    // Finite differences against the analytic gradient.
    use crate::graph::testutil::finite_diff_max_rel_err;
    let err = finite_diff_max_rel_err(&[images.vectors().clone()], 1e-6, 1e-8, |g, vars| {
        let t = g.constant(texts.vectors().clone());
        let (l, _) = similarity_loss_vars(g, vars[0], t);
        l
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn graph_losses_agree_with_plain_losses() {
    let images = random_normalized(5, 8, 70);
    let texts = random_normalized(5, 8, 71);
    let tau = 50.0;
    let mut graph = Graph::new();
    let iv = graph.constant(images.vectors().clone());
    let tv = graph.constant(texts.vectors().clone());
    let (sim_var, _) = similarity_loss_vars(&mut graph, iv, tv);
    let con_var = contrastive_loss_vars(&mut graph, iv, tv, tau);
    let sim_plain = similarity_loss(&images, &texts).unwrap();
    let con_plain = contrastive_loss(&images, &texts, tau).unwrap();
    assert!((graph.value(sim_var).item() - sim_plain).abs() < 1e-12);
    assert!((graph.value(con_var).item() - con_plain).abs() < 1e-12);
}

/// A pose-independent mock renderer makes the similarity loss pose
/// invariant: the embedding of a constant image does not change with the
/// camera.
#[test]
fn constant_renderer_makes_loss_pose_invariant() {
    use crate::encoders::{ToyEncoder, VlmEncoder};
    use crate::render::{CameraPose, VoxelRenderer};

    struct ConstantRenderer;
    impl VoxelRenderer for ConstantRenderer {
        fn output_resolution(&self) -> usize {
            32
        }
        fn render_vars(
            &self,
            graph: &mut Graph,
            _grid: crate::graph::VarId,
            _pose: &CameraPose,
        ) -> crate::error::Result<crate::graph::VarId> {
            Ok(graph.constant(Tensor::full(vec![3, 32, 32], 0.4)))
        }
    }

    let encoder = ToyEncoder::new(0, 16, 32).unwrap();
    let texts = encoder
        .encode_text(&["spoon".into(), "chair".into()])
        .unwrap();
    let renderer = ConstantRenderer;
    let eval_at = |pose: &CameraPose| -> f64 {
        let mut graph = Graph::new();
        let grid = graph.constant(Tensor::zeros(vec![8, 8, 8]));
        let img = renderer.render_vars(&mut graph, grid, pose).unwrap();
        let one = graph.reshape(img, vec![1, 3, 32, 32]);
        let two = graph.stack(&[one, one]);
        let imgs = graph.reshape(two, vec![2, 3, 32, 32]);
        let emb = encoder.encode_image_vars(&mut graph, imgs).unwrap();
        let tv = graph.constant(texts.vectors().clone());
        let (l, _) = similarity_loss_vars(&mut graph, emb, tv);
        graph.value(l).item()
    };
    let a = eval_at(&CameraPose::new(0.3, 1.0).unwrap());
    let b = eval_at(&CameraPose::new(4.0, 2.5).unwrap());
    assert_eq!(a, b, "pose must not affect the loss under a constant renderer");
}
