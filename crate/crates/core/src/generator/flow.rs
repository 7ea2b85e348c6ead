//! Conditional RealNVP coupling blocks.
//!
//! Each block passes one half of the latent through unchanged, and maps the
//! other half affinely with scale/translate MLPs fed by the pass-through
//! half concatenated with the condition embedding. Blocks alternate which
//! half passes through. The final linear layer of every sub-network starts
//! at zero, so a freshly initialized flow is the identity with logdet 0.

use std::sync::Arc;

use crate::graph::{Graph, VarId};
use crate::params::{GraphParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::FlowConfig;

/// Column indices for (pass-through, transformed) halves of block `i`.
fn mask(cfg: &FlowConfig, block: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let d = cfg.latent_dim;
    let half = d / 2;
    let first: Vec<usize> = (0..half).collect();
    let second: Vec<usize> = (half..d).collect();
    if block % 2 == 0 {
        (Arc::new(first), Arc::new(second))
    } else {
        (Arc::new(second), Arc::new(first))
    }
}

fn subnet_names(block: usize, which: &str) -> [String; 6] {
    [
        format!("flow.block{block}.{which}.l0.weight"),
        format!("flow.block{block}.{which}.l0.bias"),
        format!("flow.block{block}.{which}.l1.weight"),
        format!("flow.block{block}.{which}.l1.bias"),
        format!("flow.block{block}.{which}.l2.weight"),
        format!("flow.block{block}.{which}.l2.bias"),
    ]
}

pub(super) fn init_params(params: &mut ParamStore, cfg: &FlowConfig, seed: u64) {
    let d = cfg.latent_dim;
    let h = cfg.hidden_width;
    let mut counter = 0u64;
    for block in 0..cfg.num_coupling_blocks {
        let (pass, act) = mask(cfg, block);
        let in_dim = pass.len() + cfg.condition_dim;
        let out_dim = act.len();
        debug_assert_eq!(pass.len() + act.len(), d);
        for which in ["scale", "translate"] {
            let names = subnet_names(block, which);
            let mut rng = Rng::stream(seed, "init/flow", counter);
            counter += 1;
            let std0 = (2.0 / in_dim as f64).sqrt();
            let std1 = (2.0 / h as f64).sqrt();
            params.insert(&names[0], Tensor::randn(vec![in_dim, h], std0, &mut rng));
            params.insert(&names[1], Tensor::randn(vec![h], std0, &mut rng));
            params.insert(&names[2], Tensor::randn(vec![h, h], std1, &mut rng));
            params.insert(&names[3], Tensor::randn(vec![h], std1, &mut rng));
            // Zero final layer (weights and bias): identity-at-init.
            params.insert(&names[4], Tensor::zeros(vec![h, out_dim]));
            params.insert(&names[5], Tensor::zeros(vec![out_dim]));
        }
    }
}

fn subnet(
    graph: &mut Graph,
    gp: &GraphParams,
    block: usize,
    which: &str,
    input: VarId,
) -> VarId {
    let names = subnet_names(block, which);
    let w0 = gp.var(&names[0]);
    let b0 = gp.var(&names[1]);
    let w1 = gp.var(&names[2]);
    let b1 = gp.var(&names[3]);
    let w2 = gp.var(&names[4]);
    let b2 = gp.var(&names[5]);
    let h = graph.matmul(input, w0);
    let h = graph.add_row(h, b0);
    let h = graph.relu(h);
    let h = graph.matmul(h, w1);
    let h = graph.add_row(h, b1);
    let h = graph.relu(h);
    let h = graph.matmul(h, w2);
    graph.add_row(h, b2)
}

/// z -> u with per-item logdet = sum of coupling scale terms.
pub(super) fn forward(
    graph: &mut Graph,
    gp: &GraphParams,
    cfg: &FlowConfig,
    z: VarId,
    cond: VarId,
) -> (VarId, VarId) {
    let b = graph.value(z).shape()[0];
    let mut state = z;
    let mut logdet = graph.constant(Tensor::zeros(vec![b]));
    for block in 0..cfg.num_coupling_blocks {
        let (pass_idx, act_idx) = mask(cfg, block);
        let pass = graph.select_cols(state, Arc::clone(&pass_idx));
        let act = graph.select_cols(state, Arc::clone(&act_idx));
        let inp = graph.concat_cols(pass, cond);
        let s = subnet(graph, gp, block, "scale", inp);
        let t = subnet(graph, gp, block, "translate", inp);
        let es = graph.exp(s);
        let scaled = graph.mul(act, es);
        let new_act = graph.add(scaled, t);
        state = graph.merge_cols(pass, pass_idx, new_act, act_idx);
        let s_sum = graph.sum_cols(s);
        logdet = graph.add(logdet, s_sum);
    }
    (state, logdet)
}

/// u -> z; exact inverse of [`forward`].
pub(super) fn inverse(
    graph: &mut Graph,
    gp: &GraphParams,
    cfg: &FlowConfig,
    u: VarId,
    cond: VarId,
) -> VarId {
    let mut state = u;
    for block in (0..cfg.num_coupling_blocks).rev() {
        let (pass_idx, act_idx) = mask(cfg, block);
        let pass = graph.select_cols(state, Arc::clone(&pass_idx));
        let act = graph.select_cols(state, Arc::clone(&act_idx));
        let inp = graph.concat_cols(pass, cond);
        let s = subnet(graph, gp, block, "scale", inp);
        let t = subnet(graph, gp, block, "translate", inp);
        let shifted = graph.sub(act, t);
        let neg_s = graph.neg(s);
        let es = graph.exp(neg_s);
        let new_act = graph.mul(shifted, es);
        state = graph.merge_cols(pass, pass_idx, new_act, act_idx);
    }
    state
}

/// Names of the zero-initialized final layers, exposed so tests can
/// randomize them to exercise a non-identity flow.
pub fn final_layer_names(cfg: &FlowConfig) -> Vec<String> {
    let mut names = Vec::new();
    for block in 0..cfg.num_coupling_blocks {
        for which in ["scale", "translate"] {
            let n = subnet_names(block, which);
            names.push(n[4].clone());
            names.push(n[5].clone());
        }
    }
    names
}
