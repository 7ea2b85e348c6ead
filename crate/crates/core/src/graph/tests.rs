use std::sync::Arc;

use super::testutil::finite_diff_max_rel_err;
use super::Graph;
use crate::rng::Rng;
use crate::tensor::Tensor;

const TOL: f64 = 1e-7;

fn randt(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

#[test]
fn grad_elementwise_chain() {
    let mut rng = Rng::new(11);
    let x = randt(&[3, 4], &mut rng);
    let err = finite_diff_max_rel_err(&[x], 1e-6, 1e-8, |g, vars| {
        let a = g.sigmoid(vars[0]);
        let b = g.tanh(a);
        let c = g.quick_gelu(b);
        let d = g.relu(c);
        let e = g.affine(d, 1.7, -0.3);
        g.mean_elems(e)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn grad_matmul_bias() {
    let mut rng = Rng::new(12);
    let x = randt(&[3, 5], &mut rng);
    let w = randt(&[5, 4], &mut rng);
    let b = randt(&[4], &mut rng);
    let err = finite_diff_max_rel_err(&[x, w, b], 1e-6, 1e-8, |g, vars| {
        let h = g.matmul(vars[0], vars[1]);
        let h = g.add_row(h, vars[2]);
        let h = g.tanh(h);
        g.mean_elems(h)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn grad_mul_sub_exp() {
    let mut rng = Rng::new(13);
    let a = randt(&[2, 3], &mut rng);
    let b = randt(&[2, 3], &mut rng);
    let err = finite_diff_max_rel_err(&[a, b], 1e-6, 1e-8, |g, vars| {
        let p = g.mul(vars[0], vars[1]);
        let q = g.sub(p, vars[1]);
        let r = g.exp(q);
        let s = g.add(r, vars[0]);
        g.mean_elems(s)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn grad_split_merge_roundtrip() {
    let mut rng = Rng::new(14);
    let x = randt(&[3, 6], &mut rng);
    let pass: Arc<Vec<usize>> = Arc::new(vec![0, 2, 4]);
    let act: Arc<Vec<usize>> = Arc::new(vec![1, 3, 5]);
    let err = finite_diff_max_rel_err(&[x], 1e-6, 1e-8, |g, vars| {
        let a = g.select_cols(vars[0], Arc::clone(&pass));
        let b = g.select_cols(vars[0], Arc::clone(&act));
        let bb = g.sigmoid(b);
        let merged = g.merge_cols(a, Arc::clone(&pass), bb, Arc::clone(&act));
        g.mean_elems(merged)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn grad_rowdot_normalize_lse() {
    let mut rng = Rng::new(15);
    let a = randt(&[4, 5], &mut rng);
    let b = randt(&[4, 5], &mut rng);
    let err = finite_diff_max_rel_err(&[a, b], 1e-6, 1e-8, |g, vars| {
        let an = g.l2_normalize_rows(vars[0]);
        let bn = g.l2_normalize_rows(vars[1]);
        let d = g.rowwise_dot(an, bn);
        let bt = g.transpose2(bn);
        let m = g.matmul(an, bt);
        let lse = g.logsumexp_rows(m);
        let diag = g.take_diag(m);
        let s1 = g.mean_elems(lse);
        let s2 = g.mean_elems(diag);
        let s3 = g.mean_elems(d);
        let t = g.add(s1, s2);
        g.add(t, s3)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn grad_concat_stack_sumcols() {
    let mut rng = Rng::new(16);
    let a = randt(&[2, 3], &mut rng);
    let b = randt(&[2, 2], &mut rng);
    let err = finite_diff_max_rel_err(&[a, b], 1e-6, 1e-8, |g, vars| {
        let cat = g.concat_cols(vars[0], vars[1]);
        let s = g.sum_cols(cat);
        let s2 = g.reshape(s, vec![1, 2]);
        let stacked = g.stack(&[s2, s2]);
        g.mean_elems(stacked)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn grad_conv3d() {
    let mut rng = Rng::new(17);
    let x = randt(&[2, 3, 4, 4, 4], &mut rng);
    let w = Tensor::randn(vec![2, 3, 3, 3, 3], 0.3, &mut rng);
    let b = randt(&[2], &mut rng);
    let err = finite_diff_max_rel_err(&[x, w, b], 1e-5, 1e-8, |g, vars| {
        let y = g.conv3d(vars[0], vars[1], vars[2]);
        let y = g.tanh(y);
        g.mean_elems(y)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn grad_conv3d_1x1() {
    let mut rng = Rng::new(18);
    let x = randt(&[1, 4, 3, 3, 3], &mut rng);
    let w = randt(&[2, 4, 1, 1, 1], &mut rng);
    let b = randt(&[2], &mut rng);
    let err = finite_diff_max_rel_err(&[x, w, b], 1e-5, 1e-8, |g, vars| {
        let y = g.conv3d(vars[0], vars[1], vars[2]);
        g.mean_elems(y)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn grad_upsample_and_pool() {
    let mut rng = Rng::new(19);
    let x = randt(&[1, 2, 2, 2, 2], &mut rng);
    let err = finite_diff_max_rel_err(&[x], 1e-6, 1e-8, |g, vars| {
        let up = g.upsample3d_nearest2(vars[0]);
        let s = g.sigmoid(up);
        g.mean_elems(s)
    });
    assert!(err < TOL, "rel err {err}");

    let img = randt(&[2, 8, 8], &mut rng);
    let err = finite_diff_max_rel_err(&[img], 1e-6, 1e-8, |g, vars| {
        let p = g.avgpool2d_to(vars[0], 2, 2);
        let p = g.tanh(p);
        g.mean_elems(p)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn grad_channel_mean_resize_patchify() {
    let mut rng = Rng::new(20);
    let img = randt(&[2, 3, 4, 4], &mut rng);
    let err = finite_diff_max_rel_err(&[img.clone()], 1e-6, 1e-8, |g, vars| {
        let m = g.channel_mean(vars[0]);
        g.mean_elems(m)
    });
    assert!(err < TOL, "rel err {err}");

    let err = finite_diff_max_rel_err(&[img.clone()], 1e-6, 1e-8, |g, vars| {
        let r = g.resize_bilinear(vars[0], 6);
        let r = g.sigmoid(r);
        g.mean_elems(r)
    });
    assert!(err < TOL, "rel err {err}");

    let err = finite_diff_max_rel_err(&[img], 1e-6, 1e-8, |g, vars| {
        let p = g.patchify(vars[0], 2);
        let p = g.tanh(p);
        g.mean_elems(p)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn grad_layernorm_softmax_bmm() {
    let mut rng = Rng::new(21);
    let x = randt(&[2, 3, 4], &mut rng);
    let gamma = randt(&[4], &mut rng);
    let beta = randt(&[4], &mut rng);
    let probe = randt(&[2, 3, 4], &mut rng);
    let err = finite_diff_max_rel_err(&[x.clone(), gamma, beta], 1e-6, 1e-8, |g, vars| {
        let y = g.layernorm(vars[0], vars[1], vars[2], 1e-5);
        let y = g.softmax_lastdim(y);
        let w = g.constant(probe.clone());
        let weighted = g.mul(y, w);
        g.mean_elems(weighted)
    });
    assert!(err < 1e-6, "rel err {err}");

    let a = randt(&[2, 3, 4], &mut rng);
    let b = randt(&[2, 4, 2], &mut rng);
    let err = finite_diff_max_rel_err(&[a, b], 1e-6, 1e-8, |g, vars| {
        let y = g.bmm(vars[0], vars[1]);
        let y = g.tanh(y);
        g.mean_elems(y)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn grad_permute_tokens() {
    let mut rng = Rng::new(22);
    let x = randt(&[2, 3, 4], &mut rng);
    let cls = randt(&[4], &mut rng);
    let pos = randt(&[4, 4], &mut rng);
    let err = finite_diff_max_rel_err(&[x, cls, pos], 1e-6, 1e-8, |g, vars| {
        let with_cls = g.prepend_row(vars[0], vars[1]);
        let with_pos = g.add_broadcast_tail(with_cls, vars[2]);
        let p = g.permute(with_pos, &[1, 0, 2]);
        let p = g.permute(p, &[1, 0, 2]);
        let tok = g.take_token(p, 0);
        let tok = g.sigmoid(tok);
        g.mean_elems(tok)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn constants_do_not_track() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let l = g.leaf(Tensor::scalar(3.0));
    let p = g.mul(c, l);
    let grads = g.backward(p);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(l).unwrap().item(), 2.0);
}

#[test]
fn grad_accumulates_over_reuse() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(1.5));
    let y = g.mul(x, x); // x^2 -> dy/dx = 2x = 3
    let grads = g.backward(y);
    assert!((grads.get(x).unwrap().item() - 3.0).abs() < 1e-12);
}

