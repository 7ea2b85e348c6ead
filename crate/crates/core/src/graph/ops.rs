//! Elementwise and linear-algebra ops.

use std::sync::Arc;

use super::{Graph, VarId};
use crate::parallel::{for_each_chunk, Exec};
use crate::tensor::{stable_sigmoid, Tensor};

pub(crate) fn matmul_kernel(
    exec: Exec,
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_chunk(exec, &mut out, n, 2 * k, |i, row| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
    out
}

fn transpose_kernel(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected rank-2 tensor, got {:?}", s);
    (s[0], s[1])
}

impl Graph {
    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.axpy(1.0, vb);
        self.push(out, &[a, b], move |g| vec![(a, g.clone()), (b, g.clone())])
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let mut out = va.clone();
        out.axpy(-1.0, vb);
        self.push(out, &[a, b], move |g| {
            vec![(a, g.clone()), (b, g.map(|v| -v))]
        })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data);
        self.push(out, &[a, b], move |g| {
            let ga = Tensor::from_vec(
                va.shape().to_vec(),
                g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect(),
            );
            let gb = Tensor::from_vec(
                va.shape().to_vec(),
                g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect(),
            );
            vec![(a, ga), (b, gb)]
        })
    }

    /// y = scale * x + shift, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: VarId, scale: f64, shift: f64) -> VarId {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, &[x], move |g| vec![(x, g.map(|v| scale * v))])
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        self.affine(x, -1.0, 0.0)
    }

    /// Row-broadcast bias add: x[R,C] + b[C].
    pub fn add_row(&mut self, x: VarId, b: VarId) -> VarId {
        let (r, c) = dims2(self.value(x));
        assert_eq!(self.value(b).shape(), &[c], "bias shape mismatch");
        let bv = self.value(b).clone();
        let mut out = self.value(x).clone();
        {
            let d = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] += bv.data()[j];
                }
            }
        }
        self.push(out, &[x, b], move |g| {
            let mut gb = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    gb[j] += g.data()[i * c + j];
                }
            }
            vec![(x, g.clone()), (b, Tensor::from_vec(vec![c], gb))]
        })
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(stable_sigmoid);
        let y = out.clone();
        self.push(out, &[x], move |g| {
            let gx = Tensor::from_vec(
                y.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect(),
            );
            vec![(x, gx)]
        })
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let xv = self.value(x).clone();
        let out = xv.map(|v| v.max(0.0));
        self.push(out, &[x], move |g| {
            let gx = Tensor::from_vec(
                xv.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
            vec![(x, gx)]
        })
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(f64::tanh);
        let y = out.clone();
        self.push(out, &[x], move |g| {
            let gx = Tensor::from_vec(
                y.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect(),
            );
            vec![(x, gx)]
        })
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(f64::exp);
        let y = out.clone();
        self.push(out, &[x], move |g| {
            let gx = Tensor::from_vec(
                y.shape().to_vec(),
                g.data().iter().zip(y.data()).map(|(g, e)| g * e).collect(),
            );
            vec![(x, gx)]
        })
    }

    /// x * sigmoid(1.702 x), the activation used by CLIP-style towers.
    pub fn quick_gelu(&mut self, x: VarId) -> VarId {
        let xv = self.value(x).clone();
        let out = xv.map(|v| v * stable_sigmoid(1.702 * v));
        self.push(out, &[x], move |g| {
            let gx = Tensor::from_vec(
                xv.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, x)| {
                        let s = stable_sigmoid(1.702 * x);
                        g * (s + x * 1.702 * s * (1.0 - s))
                    })
                    .collect(),
            );
            vec![(x, gx)]
        })
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let out = Tensor::from_vec(
            vec![m, n],
            matmul_kernel(Exec::auto(), va.data(), vb.data(), m, k, n),
        );
        self.push(out, &[a, b], move |g| {
            // dA = G B^T, dB = A^T G
            let bt = transpose_kernel(vb.data(), k, n);
            let ga = matmul_kernel(Exec::auto(), g.data(), &bt, m, n, k);
            let at = transpose_kernel(va.data(), m, k);
            let gb = matmul_kernel(Exec::auto(), &at, g.data(), k, m, n);
            vec![
                (a, Tensor::from_vec(vec![m, k], ga)),
                (b, Tensor::from_vec(vec![k, n], gb)),
            ]
        })
    }

    pub fn transpose2(&mut self, x: VarId) -> VarId {
        let (m, n) = dims2(self.value(x));
        let out = Tensor::from_vec(vec![n, m], transpose_kernel(self.value(x).data(), m, n));
        self.push(out, &[x], move |g| {
            vec![(x, Tensor::from_vec(vec![m, n], transpose_kernel(g.data(), n, m)))]
        })
    }

    pub fn reshape(&mut self, x: VarId, shape: impl Into<Vec<usize>>) -> VarId {
        let shape = shape.into();
        let orig = self.value(x).shape().to_vec();
        let out = self.value(x).reshape(shape);
        self.push(out, &[x], move |g| vec![(x, g.reshape(orig.clone()))])
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (r, ca) = dims2(self.value(a));
        let (r2, cb) = dims2(self.value(b));
        assert_eq!(r, r2, "concat_cols row mismatch");
        let mut data = vec![0.0; r * (ca + cb)];
        for i in 0..r {
            data[i * (ca + cb)..i * (ca + cb) + ca]
                .copy_from_slice(&self.value(a).data()[i * ca..(i + 1) * ca]);
            data[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                .copy_from_slice(&self.value(b).data()[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::from_vec(vec![r, ca + cb], data);
        self.push(out, &[a, b], move |g| {
            let mut ga = vec![0.0; r * ca];
            let mut gb = vec![0.0; r * cb];
            for i in 0..r {
                ga[i * ca..(i + 1) * ca]
                    .copy_from_slice(&g.data()[i * (ca + cb)..i * (ca + cb) + ca]);
                gb[i * cb..(i + 1) * cb]
                    .copy_from_slice(&g.data()[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
            }
            vec![
                (a, Tensor::from_vec(vec![r, ca], ga)),
                (b, Tensor::from_vec(vec![r, cb], gb)),
            ]
        })
    }

    /// Column gather: out[:, k] = x[:, idx[k]].
    pub fn select_cols(&mut self, x: VarId, idx: Arc<Vec<usize>>) -> VarId {
        let (r, c) = dims2(self.value(x));
        let k = idx.len();
        let xv = self.value(x).data();
        let mut data = vec![0.0; r * k];
        for i in 0..r {
            for (j, &col) in idx.iter().enumerate() {
                debug_assert!(col < c);
                data[i * k + j] = xv[i * c + col];
            }
        }
        let out = Tensor::from_vec(vec![r, k], data);
        let idx2 = Arc::clone(&idx);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for (j, &col) in idx2.iter().enumerate() {
                    gx[i * c + col] += g.data()[i * k + j];
                }
            }
            vec![(x, Tensor::from_vec(vec![r, c], gx))]
        })
    }

    /// Inverse of a two-way column split: place a's columns at idx_a and b's
    /// at idx_b. The index sets must partition 0..(Ka+Kb).
    pub fn merge_cols(
        &mut self,
        a: VarId,
        idx_a: Arc<Vec<usize>>,
        b: VarId,
        idx_b: Arc<Vec<usize>>,
    ) -> VarId {
        let (r, ka) = dims2(self.value(a));
        let (r2, kb) = dims2(self.value(b));
        assert_eq!(r, r2, "merge_cols row mismatch");
        assert_eq!(ka, idx_a.len());
        assert_eq!(kb, idx_b.len());
        let c = ka + kb;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for (j, &col) in idx_a.iter().enumerate() {
                data[i * c + col] = self.value(a).data()[i * ka + j];
            }
            for (j, &col) in idx_b.iter().enumerate() {
                data[i * c + col] = self.value(b).data()[i * kb + j];
            }
        }
        let out = Tensor::from_vec(vec![r, c], data);
        let (ia, ib) = (Arc::clone(&idx_a), Arc::clone(&idx_b));
        self.push(out, &[a, b], move |g| {
            let mut ga = vec![0.0; r * ka];
            let mut gb = vec![0.0; r * kb];
            for i in 0..r {
                for (j, &col) in ia.iter().enumerate() {
                    ga[i * ka + j] = g.data()[i * c + col];
                }
                for (j, &col) in ib.iter().enumerate() {
                    gb[i * kb + j] = g.data()[i * c + col];
                }
            }
            vec![
                (a, Tensor::from_vec(vec![r, ka], ga)),
                (b, Tensor::from_vec(vec![r, kb], gb)),
            ]
        })
    }

    pub fn sum_cols(&mut self, x: VarId) -> VarId {
        let (r, c) = dims2(self.value(x));
        let xv = self.value(x).data();
        let data: Vec<f64> = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
        let out = Tensor::from_vec(vec![r], data);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g.data()[i];
                }
            }
            vec![(x, Tensor::from_vec(vec![r, c], gx))]
        })
    }

    /// Per-row inner product of two [R,C] tensors -> [R].
    pub fn rowwise_dot(&mut self, a: VarId, b: VarId) -> VarId {
        let (r, c) = dims2(self.value(a));
        assert_eq!(self.value(b).shape(), &[r, c], "rowwise_dot shape mismatch");
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let data: Vec<f64> = (0..r)
            .map(|i| {
                va.data()[i * c..(i + 1) * c]
                    .iter()
                    .zip(&vb.data()[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let out = Tensor::from_vec(vec![r], data);
        self.push(out, &[a, b], move |g| {
            let mut ga = vec![0.0; r * c];
            let mut gb = vec![0.0; r * c];
            for i in 0..r {
                let gi = g.data()[i];
                for j in 0..c {
                    ga[i * c + j] = gi * vb.data()[i * c + j];
                    gb[i * c + j] = gi * va.data()[i * c + j];
                }
            }
            vec![
                (a, Tensor::from_vec(vec![r, c], ga)),
                (b, Tensor::from_vec(vec![r, c], gb)),
            ]
        })
    }

    /// Mean over all elements -> scalar [1].
    pub fn mean_elems(&mut self, x: VarId) -> VarId {
        let n = self.value(x).numel();
        let shape = self.value(x).shape().to_vec();
        let mean = self.value(x).data().iter().sum::<f64>() / n as f64;
        self.push(Tensor::scalar(mean), &[x], move |g| {
            let gv = g.item() / n as f64;
            vec![(x, Tensor::full(shape.clone(), gv))]
        })
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: VarId) -> VarId {
        let (r, c) = dims2(self.value(x));
        let xv = self.value(x).clone();
        let mut norms = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        let out = Tensor::from_vec(vec![r, c], data);
        let y = out.clone();
        self.push(out, &[x], move |g| {
            // d(x/||x||) = (g - y (g.y)) / ||x||
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let gr = &g.data()[i * c..(i + 1) * c];
                let yr = &y.data()[i * c..(i + 1) * c];
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                }
            }
            vec![(x, Tensor::from_vec(vec![r, c], gx))]
        })
    }

    /// Stable log-sum-exp over each row -> [R].
    pub fn logsumexp_rows(&mut self, x: VarId) -> VarId {
        let (r, c) = dims2(self.value(x));
        let xv = self.value(x).clone();
        let mut data = vec![0.0; r];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            data[i] = m + s.ln();
        }
        let lse = Tensor::from_vec(vec![r], data);
        let out = lse.clone();
        self.push(out, &[x], move |g| {
            // d lse / d x = softmax(x)
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let gi = g.data()[i];
                for j in 0..c {
                    gx[i * c + j] = gi * (xv.data()[i * c + j] - lse.data()[i]).exp();
                }
            }
            vec![(x, Tensor::from_vec(vec![r, c], gx))]
        })
    }

    pub fn take_diag(&mut self, x: VarId) -> VarId {
        let (r, c) = dims2(self.value(x));
        assert_eq!(r, c, "take_diag needs a square matrix");
        let data: Vec<f64> = (0..r).map(|i| self.value(x).data()[i * c + i]).collect();
        let out = Tensor::from_vec(vec![r], data);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + i] = g.data()[i];
            }
            vec![(x, Tensor::from_vec(vec![r, c], gx))]
        })
    }

    /// Extract one row of a [R,C] tensor -> [C].
    pub fn take_row(&mut self, x: VarId, row: usize) -> VarId {
        let (r, c) = dims2(self.value(x));
        assert!(row < r, "take_row index out of range");
        let data = self.value(x).data()[row * c..(row + 1) * c].to_vec();
        let out = Tensor::from_vec(vec![c], data);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; r * c];
            gx[row * c..(row + 1) * c].copy_from_slice(g.data());
            vec![(x, Tensor::from_vec(vec![r, c], gx))]
        })
    }

    /// Stack K same-shape tensors along a new leading dim.
    pub fn stack(&mut self, items: &[VarId]) -> VarId {
        assert!(!items.is_empty(), "stack of zero tensors");
        let shape = self.value(items[0]).shape().to_vec();
        let per = self.value(items[0]).numel();
        let mut data = Vec::with_capacity(items.len() * per);
        for &v in items {
            assert_eq!(self.value(v).shape(), &shape[..], "stack shape mismatch");
            data.extend_from_slice(self.value(v).data());
        }
        let mut out_shape = vec![items.len()];
        out_shape.extend_from_slice(&shape);
        let out = Tensor::from_vec(out_shape, data);
        let items = items.to_vec();
        self.push(out, &items.clone(), move |g| {
            items
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    (
                        v,
                        Tensor::from_vec(
                            shape.clone(),
                            g.data()[i * per..(i + 1) * per].to_vec(),
                        ),
                    )
                })
                .collect()
        })
    }
}
