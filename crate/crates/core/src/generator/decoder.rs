//! Occupancy decoder: a latent-to-seed-volume projection followed by
//! residual 3D-convolutional upsampling blocks emitting one occupancy value
//! per voxel, squashed to (0,1).
//!
//! Zero-convolution adaptation replaces each block's output with
//! frozen-copy(x) + ZeroConv3d(trainable-copy(x)); the 1x1x1 ZeroConv
//! kernels start at zero so the adapted decoder is exactly the frozen one
//! at the beginning of training.

use crate::error::Result;
use crate::graph::{Graph, VarId};
use crate::params::{GraphParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{DecoderConfig, FlowConfig};

pub const TUNED_INFIX: &str = ".tuned";
pub const ZEROCONV_INFIX: &str = ".zeroconv";

/// Initial head bias: fresh occupancies center moderately below the
/// conventional 0.05 threshold, so soft-binarized densities start sparse
/// and the renderer operates in its responsive range instead of
/// saturating.
const HEAD_BIAS: f64 = -3.4760986898352733; // logit(0.03)

/// Channel widths entering block 0, 1, ...; the last entry feeds the head.
pub fn decoder_channels(cfg: &DecoderConfig) -> Vec<usize> {
    (0..=cfg.num_blocks)
        .map(|i| (cfg.base_channels >> i).max(4))
        .collect()
}

fn block_param_names(block: usize, infix: &str) -> [String; 6] {
    [
        format!("decoder.block{block}{infix}.conv1.weight"),
        format!("decoder.block{block}{infix}.conv1.bias"),
        format!("decoder.block{block}{infix}.conv2.weight"),
        format!("decoder.block{block}{infix}.conv2.bias"),
        format!("decoder.block{block}{infix}.skip.weight"),
        format!("decoder.block{block}{infix}.skip.bias"),
    ]
}

pub(super) fn init_params(
    params: &mut ParamStore,
    cfg: &DecoderConfig,
    flow_cfg: &FlowConfig,
    seed: u64,
) -> Result<()> {
    let base = cfg.base_resolution()?;
    let ch = decoder_channels(cfg);
    let d = flow_cfg.latent_dim;
    let mut rng = Rng::stream(seed, "init/decoder", 0);

    // Biases are randomly initialized (weight-scale), not zeroed: the
    // zero-noise latent of an identity-initialized flow is exactly 0, and a
    // zero-bias network is a constant function of it with dead ReLUs. The
    // per-voxel projection bias in particular seeds spatial structure.
    let proj_out = ch[0] * base * base * base;
    let proj_std = (2.0 / d as f64).sqrt();
    params.insert(
        "decoder.proj.weight",
        Tensor::randn(vec![d, proj_out], proj_std, &mut rng),
    );
    params.insert(
        "decoder.proj.bias",
        Tensor::randn(vec![proj_out], proj_std, &mut rng),
    );

    for block in 0..cfg.num_blocks {
        let (ci, co) = (ch[block], ch[block + 1]);
        let names = block_param_names(block, "");
        let std3 = (2.0 / (ci as f64 * 27.0)).sqrt();
        let std3b = (2.0 / (co as f64 * 27.0)).sqrt();
        params.insert(&names[0], Tensor::randn(vec![co, ci, 3, 3, 3], std3, &mut rng));
        params.insert(&names[1], Tensor::randn(vec![co], std3, &mut rng));
        params.insert(&names[2], Tensor::randn(vec![co, co, 3, 3, 3], std3b, &mut rng));
        params.insert(&names[3], Tensor::randn(vec![co], std3b, &mut rng));
        let skip_std = (2.0 / ci as f64).sqrt();
        params.insert(
            &names[4],
            Tensor::randn(vec![co, ci, 1, 1, 1], skip_std, &mut rng),
        );
        params.insert(&names[5], Tensor::randn(vec![co], skip_std, &mut rng));
    }

    let last = *ch.last().expect("at least one channel");
    params.insert(
        "decoder.head.weight",
        Tensor::randn(vec![1, last, 1, 1, 1], 0.05, &mut rng),
    );
    params.insert(
        "decoder.head.bias",
        Tensor::from_vec(vec![1], vec![HEAD_BIAS]),
    );
    Ok(())
}

pub(super) fn wrap_zeroconv(
    params: &mut ParamStore,
    cfg: &DecoderConfig,
    _flow_cfg: &FlowConfig,
) -> Result<()> {
    let ch = decoder_channels(cfg);
    for block in 0..cfg.num_blocks {
        let frozen = block_param_names(block, "");
        let tuned = block_param_names(block, TUNED_INFIX);
        for (src, dst) in frozen.iter().zip(tuned.iter()) {
            let value = params
                .get(src)
                .unwrap_or_else(|| panic!("missing decoder parameter {src}"))
                .clone();
            params.insert(dst, value);
        }
        let co = ch[block + 1];
        params.insert(
            format!("decoder.block{block}{ZEROCONV_INFIX}.weight"),
            Tensor::zeros(vec![co, co, 1, 1, 1]),
        );
        params.insert(
            format!("decoder.block{block}{ZEROCONV_INFIX}.bias"),
            Tensor::zeros(vec![co]),
        );
    }
    Ok(())
}

/// One residual upsampling block under the parameter set named by `infix`.
fn block_forward(
    graph: &mut Graph,
    gp: &GraphParams,
    block: usize,
    infix: &str,
    upsampled: VarId,
) -> VarId {
    let names = block_param_names(block, infix);
    let w1 = gp.var(&names[0]);
    let b1 = gp.var(&names[1]);
    let w2 = gp.var(&names[2]);
    let b2 = gp.var(&names[3]);
    let ws = gp.var(&names[4]);
    let bs = gp.var(&names[5]);
    let h = graph.conv3d(upsampled, w1, b1);
    let h = graph.relu(h);
    let h = graph.conv3d(h, w2, b2);
    let skip = graph.conv3d(upsampled, ws, bs);
    let sum = graph.add(h, skip);
    graph.relu(sum)
}

/// z [B,d] -> occupancy [B,N,N,N] in (0,1).
pub(super) fn forward(
    graph: &mut Graph,
    gp: &GraphParams,
    cfg: &DecoderConfig,
    adapted: bool,
    z: VarId,
) -> VarId {
    let b = graph.value(z).shape()[0];
    let base = cfg.base_resolution().expect("validated at construction");
    let ch = decoder_channels(cfg);

    let w = gp.var("decoder.proj.weight");
    let bias = gp.var("decoder.proj.bias");
    let h = graph.matmul(z, w);
    let h = graph.add_row(h, bias);
    let mut x = graph.reshape(h, vec![b, ch[0], base, base, base]);

    for block in 0..cfg.num_blocks {
        let up = graph.upsample3d_nearest2(x);
        let frozen_out = block_forward(graph, gp, block, "", up);
        x = if adapted {
            let tuned_out = block_forward(graph, gp, block, TUNED_INFIX, up);
            let zw = gp.var(&format!("decoder.block{block}{ZEROCONV_INFIX}.weight"));
            let zb = gp.var(&format!("decoder.block{block}{ZEROCONV_INFIX}.bias"));
            let zc = graph.conv3d(tuned_out, zw, zb);
            graph.add(frozen_out, zc)
        } else {
            frozen_out
        };
    }

    let hw = gp.var("decoder.head.weight");
    let hb = gp.var("decoder.head.bias");
    let logits = graph.conv3d(x, hw, hb);
    let occ = graph.sigmoid(logits);
    let n = cfg.resolution;
    graph.reshape(occ, vec![b, n, n, n])
}
