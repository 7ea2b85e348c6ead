//! The parallel and sequential kernel paths must produce bit-identical
//! results: parallel work is mapped over disjoint output slices and
//! contributions fold in a fixed order, never through shared accumulators.

#![cfg(feature = "parallel")]

use zeroforge::bench_support::{self, Exec};
use zeroforge::render::{CameraPose, RenderConfig};
use zeroforge::rng::Rng;

#[test]
fn render_paths_are_bit_identical() {
    let n = 16usize;
    let mut rng = Rng::new(11);
    let grid: Vec<f64> = (0..n * n * n).map(|_| rng.next_f64()).collect();
    let pose = CameraPose::new(1.3, 0.9).unwrap();
    let cfg = RenderConfig {
        image_size: 48,
        ..RenderConfig::default()
    };
    let (px_seq, tau_seq) = bench_support::render_forward(Exec::Sequential, &grid, n, &pose, &cfg);
    let (px_par, tau_par) = bench_support::render_forward(Exec::Parallel, &grid, n, &pose, &cfg);
    assert_eq!(px_seq, px_par);
    assert_eq!(tau_seq, tau_par);

    let gout: Vec<f64> = (0..48 * 48).map(|_| rng.next_normal()).collect();
    let g_seq = bench_support::render_backward(Exec::Sequential, n, &pose, &cfg, &tau_seq, &gout);
    let g_par = bench_support::render_backward(Exec::Parallel, n, &pose, &cfg, &tau_par, &gout);
    assert_eq!(g_seq, g_par);
}

#[test]
fn conv_and_matmul_paths_are_bit_identical() {
    let (bsz, ci, co, d) = (2usize, 6usize, 5usize, 10usize);
    let mut rng = Rng::new(12);
    let x: Vec<f64> = (0..bsz * ci * d * d * d).map(|_| rng.next_normal()).collect();
    let w: Vec<f64> = (0..co * ci * 27).map(|_| rng.next_normal()).collect();
    let bias: Vec<f64> = (0..co).map(|_| rng.next_normal()).collect();
    let seq = bench_support::conv3d_forward(Exec::Sequential, &x, &w, &bias, bsz, ci, co, d, d, d, 3);
    let par = bench_support::conv3d_forward(Exec::Parallel, &x, &w, &bias, bsz, ci, co, d, d, d, 3);
    assert_eq!(seq, par);

    let m = 96usize;
    let a: Vec<f64> = (0..m * m).map(|_| rng.next_normal()).collect();
    let b: Vec<f64> = (0..m * m).map(|_| rng.next_normal()).collect();
    assert_eq!(
        bench_support::matmul(Exec::Sequential, &a, &b, m, m, m),
        bench_support::matmul(Exec::Parallel, &a, &b, m, m, m)
    );
}
