//! Tape-based reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Graph`] is built per evaluation (define-by-run). Leaves are tracked,
//! constants are not; every op prunes gradient work for subgraphs that no
//! tracked leaf feeds. `backward` walks the tape in reverse creation order,
//! which is a valid topological order because nodes only reference earlier
//! nodes.
//!
//! Kernels that dominate runtime (matmul, conv3d, rendering) parallelize
//! over disjoint output slices; see [`crate::parallel`].

mod nn;
mod ops;
#[cfg(test)]
mod tests;

// Raw kernels re-exported for the bench suite.
pub(crate) use nn::conv3d_forward as conv3d_forward_inner;
pub(crate) use ops::matmul_kernel as matmul_kernel_inner;

#[doc(hidden)]
pub fn conv3d_forward_kernel(
    exec: crate::parallel::Exec,
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    b: usize,
    ci: usize,
    co: usize,
    d: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    conv3d_forward_inner(exec, x, w, bias, b, ci, co, d, h, wd, k)
}

#[doc(hidden)]
pub fn matmul_kernel_raw(
    exec: crate::parallel::Exec,
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    matmul_kernel_inner(exec, a, b, m, k, n)
}

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<(VarId, Tensor)>>;

struct Node {
    value: Tensor,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Tracked input: gradients will be computed for it.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.nodes.push(Node {
            value,
            needs_grad: true,
            backward: None,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Untracked input: gradients never flow into it, and subgraphs that
    /// depend only on constants skip backward work entirely.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.nodes.push(Node {
            value,
            needs_grad: false,
            backward: None,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        parents: &[VarId],
        backward: impl Fn(&Tensor) -> Vec<(VarId, Tensor)> + 'static,
    ) -> VarId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            backward: if needs_grad { Some(Box::new(backward)) } else { None },
        });
        VarId(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar root. Returns one gradient slot per
    /// node; untracked nodes stay `None`.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be a scalar, got shape {:?}",
            self.value(root).shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].clone() else {
                continue;
            };
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            for (pid, contrib) in back(&gout) {
                if !self.nodes[pid.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    contrib.shape(),
                    self.nodes[pid.0].value.shape(),
                    "gradient shape mismatch for node {}",
                    pid.0
                );
                match grads[pid.0].as_mut() {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    None => grads[pid.0] = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a tracked leaf, zeros if it never received one.
    pub fn get_or_zeros(&self, v: VarId, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}
