//! Neural-network ops: 3D convolution, upsampling, pooling, bilinear resize,
//! patch extraction, layer norm, softmax and batched matmul for attention.

use std::sync::Arc;

use super::{Graph, VarId};
use crate::parallel::{for_each_chunk, Exec};
use crate::tensor::Tensor;

fn dims5(t: &Tensor) -> (usize, usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 5, "expected rank-5 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3], s[4])
}

/// Stride-1 zero-padded 3D convolution forward.
/// x: [B,Ci,D,H,W], w: [Co,Ci,K,K,K], bias: [Co] -> [B,Co,D,H,W].
pub(crate) fn conv3d_forward(
    exec: Exec,
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
    let pad = k / 2;
    let vol = d * h * wd;
    let mut out = vec![0.0; b * co * vol];
    // One (batch, out-channel) slab per task.
    for_each_chunk(exec, &mut out, vol, 2 * ci * k * k * k, |slab, dst| {
        let bi = slab / co;
        let oc = slab % co;
        for o in dst.iter_mut() {
            *o = bias[oc];
        }
        for icn in 0..ci {
            let xoff = (bi * ci + icn) * vol;
            let woff = ((oc * ci) + icn) * k * k * k;
            for dz in 0..k {
                for dy in 0..k {
                    for dx in 0..k {
                        let wv = w[woff + (dz * k + dy) * k + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oz_lo, oz_hi) = shift_range(d, dz, pad);
                        let (oy_lo, oy_hi) = shift_range(h, dy, pad);
                        let (ox_lo, ox_hi) = shift_range(wd, dx, pad);
                        for oz in oz_lo..oz_hi {
                            let iz = (oz + dz).wrapping_sub(pad);
                            for oy in oy_lo..oy_hi {
                                let iy = (oy + dy).wrapping_sub(pad);
                                let orow = (oz * h + oy) * wd;
                                let irow = xoff + (iz * h + iy) * wd;
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox + dx).wrapping_sub(pad);
                                    dst[orow + ox] += wv * x[irow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Valid output range so that input index `o + delta - pad` stays in bounds.
fn shift_range(extent: usize, delta: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(delta);
    let hi = (extent + pad).saturating_sub(delta).min(extent);
    (lo, hi.max(lo))
}

/// Gradient w.r.t. the input of conv3d_forward; pure gather, deterministic.
pub(crate) fn conv3d_backward_input(
    exec: Exec,
    gout: &[f64],
    w: &[f64],
    b: usize,
    ci: usize,
    co: usize,
    d: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let vol = d * h * wd;
    let mut gin = vec![0.0; b * ci * vol];
    for_each_chunk(exec, &mut gin, vol, 2 * co * k * k * k, |slab, dst| {
        let bi = slab / ci;
        let icn = slab % ci;
        for oc in 0..co {
            let goff = (bi * co + oc) * vol;
            let woff = ((oc * ci) + icn) * k * k * k;
            for dz in 0..k {
                for dy in 0..k {
                    for dx in 0..k {
                        let wv = w[woff + (dz * k + dy) * k + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        // out[o] consumed in[o + delta - pad]  =>
                        // gin[i] += w * gout[i - delta + pad]
                        let (iz_lo, iz_hi) = shift_range(d, k - 1 - dz, pad);
                        let (iy_lo, iy_hi) = shift_range(h, k - 1 - dy, pad);
                        let (ix_lo, ix_hi) = shift_range(wd, k - 1 - dx, pad);
                        for iz in iz_lo..iz_hi {
                            let oz = (iz + pad).wrapping_sub(dz);
                            for iy in iy_lo..iy_hi {
                                let oy = (iy + pad).wrapping_sub(dy);
                                let irow = (iz * h + iy) * wd;
                                let grow = goff + (oz * h + oy) * wd;
                                for ix in ix_lo..ix_hi {
                                    let ox = (ix + pad).wrapping_sub(dx);
                                    dst[irow + ix] += wv * gout[grow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Gradient w.r.t. conv3d weights; each weight entry is an independent gather.
pub(crate) fn conv3d_backward_weight(
    exec: Exec,
    gout: &[f64],
    x: &[f64],
    b: usize,
    ci: usize,
    co: usize,
    d: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let vol = d * h * wd;
    let kk = k * k * k;
    let mut gw = vec![0.0; co * ci * kk];
    for_each_chunk(exec, &mut gw, kk, 2 * b * vol, |pair, dst| {
        let oc = pair / ci;
        let icn = pair % ci;
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let goff = (bi * co + oc) * vol;
                        let xoff = (bi * ci + icn) * vol;
                        let (oz_lo, oz_hi) = shift_range(d, dz, pad);
                        let (oy_lo, oy_hi) = shift_range(h, dy, pad);
                        let (ox_lo, ox_hi) = shift_range(wd, dx, pad);
                        for oz in oz_lo..oz_hi {
                            let iz = (oz + dz).wrapping_sub(pad);
                            for oy in oy_lo..oy_hi {
                                let iy = (oy + dy).wrapping_sub(pad);
                                let grow = goff + (oz * h + oy) * wd;
                                let xrow = xoff + (iz * h + iy) * wd;
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox + dx).wrapping_sub(pad);
                                    acc += gout[grow + ox] * x[xrow + ix];
                                }
                            }
                        }
                    }
                    dst[(dz * k + dy) * k + dx] = acc;
                }
            }
        }
    });
    gw
}

impl Graph {
    /// Zero-padded stride-1 3D convolution with odd kernel size.
    pub fn conv3d(&mut self, x: VarId, w: VarId, bias: VarId) -> VarId {
        let (b, ci, d, h, wd) = dims5(self.value(x));
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 5, "conv3d weight must be rank 5");
        let (co, ci2, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ci, ci2, "conv3d channel mismatch");
        assert!(ws[2] == ws[3] && ws[3] == ws[4], "conv3d kernel must be cubic");
        assert_eq!(k % 2, 1, "conv3d kernel size must be odd");
        assert_eq!(self.value(bias).shape(), &[co], "conv3d bias shape");

        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(bias).clone();
        let out = Tensor::from_vec(
            vec![b, co, d, h, wd],
            conv3d_forward(
                Exec::auto(),
                xv.data(),
                wv.data(),
                bv.data(),
                b,
                ci,
                co,
                d,
                h,
                wd,
                k,
            ),
        );
        self.push(out, &[x, w, bias], move |g| {
            let gin = conv3d_backward_input(Exec::auto(), g.data(), wv.data(), b, ci, co, d, h, wd, k);
            let gw = conv3d_backward_weight(Exec::auto(), g.data(), xv.data(), b, ci, co, d, h, wd, k);
            let vol = d * h * wd;
            let mut gb = vec![0.0; co];
            for bi in 0..b {
                for oc in 0..co {
                    gb[oc] += g.data()[(bi * co + oc) * vol..(bi * co + oc + 1) * vol]
                        .iter()
                        .sum::<f64>();
                }
            }
            vec![
                (x, Tensor::from_vec(vec![b, ci, d, h, wd], gin)),
                (w, Tensor::from_vec(vec![co, ci, k, k, k], gw)),
                (bias, Tensor::from_vec(vec![co], gb)),
            ]
        })
    }

    /// Nearest-neighbour 2x upsampling of [B,C,D,H,W].
    pub fn upsample3d_nearest2(&mut self, x: VarId) -> VarId {
        let (b, c, d, h, w) = dims5(self.value(x));
        let (d2, h2, w2) = (d * 2, h * 2, w * 2);
        let xv = self.value(x).clone();
        let mut data = vec![0.0; b * c * d2 * h2 * w2];
        for bc in 0..b * c {
            let src = &xv.data()[bc * d * h * w..(bc + 1) * d * h * w];
            let dst = &mut data[bc * d2 * h2 * w2..(bc + 1) * d2 * h2 * w2];
            for z in 0..d2 {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dst[(z * h2 + y) * w2 + xx] = src[((z / 2) * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![b, c, d2, h2, w2], data);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; b * c * d * h * w];
            for bc in 0..b * c {
                let gsrc = &g.data()[bc * d2 * h2 * w2..(bc + 1) * d2 * h2 * w2];
                let gdst = &mut gx[bc * d * h * w..(bc + 1) * d * h * w];
                for z in 0..d2 {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            gdst[((z / 2) * h + y / 2) * w + xx / 2] +=
                                gsrc[(z * h2 + y) * w2 + xx];
                        }
                    }
                }
            }
            vec![(x, Tensor::from_vec(vec![b, c, d, h, w], gx))]
        })
    }

    /// Mean over the channel dim: [B,C,H,W] -> [B,H,W].
    pub fn channel_mean(&mut self, x: VarId) -> VarId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "channel_mean expects [B,C,H,W]");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x).clone();
        let hw = h * w;
        let mut data = vec![0.0; b * hw];
        for bi in 0..b {
            for ch in 0..c {
                let src = &xv.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                let dst = &mut data[bi * hw..(bi + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s / c as f64;
                }
            }
        }
        let out = Tensor::from_vec(vec![b, h, w], data);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; b * c * hw];
            for bi in 0..b {
                for ch in 0..c {
                    let dst = &mut gx[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                    let src = &g.data()[bi * hw..(bi + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s / c as f64;
                    }
                }
            }
            vec![(x, Tensor::from_vec(vec![b, c, h, w], gx))]
        })
    }

    /// Average pooling of [B,H,W] down to [B,oh,ow]; H, W must divide evenly.
    pub fn avgpool2d_to(&mut self, x: VarId, oh: usize, ow: usize) -> VarId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "avgpool2d_to expects [B,H,W]");
        let (b, h, w) = (s[0], s[1], s[2]);
        assert!(h % oh == 0 && w % ow == 0, "pool size must divide input");
        let (kh, kw) = (h / oh, w / ow);
        let inv = 1.0 / (kh * kw) as f64;
        let xv = self.value(x).clone();
        let mut data = vec![0.0; b * oh * ow];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for iy in oy * kh..(oy + 1) * kh {
                        for ix in ox * kw..(ox + 1) * kw {
                            acc += xv.data()[(bi * h + iy) * w + ix];
                        }
                    }
                    data[(bi * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let out = Tensor::from_vec(vec![b, oh, ow], data);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; b * h * w];
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g.data()[(bi * oh + oy) * ow + ox] * inv;
                        for iy in oy * kh..(oy + 1) * kh {
                            for ix in ox * kw..(ox + 1) * kw {
                                gx[(bi * h + iy) * w + ix] = gv;
                            }
                        }
                    }
                }
            }
            vec![(x, Tensor::from_vec(vec![b, h, w], gx))]
        })
    }

    /// Bilinear resize of [B,C,S,S] to [B,C,R,R] with half-pixel centers.
    /// Exact identity when S == R.
    pub fn resize_bilinear(&mut self, x: VarId, r: usize) -> VarId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "resize_bilinear expects [B,C,S,S]");
        let (b, c, sh, sw) = (s[0], s[1], s[2], s[3]);
        assert_eq!(sh, sw, "resize_bilinear expects square images");
        if sh == r {
            // Bitwise identity.
            let out = self.value(x).clone();
            return self.push(out, &[x], move |g| vec![(x, g.clone())]);
        }
        let taps = Arc::new(resize_taps(sh, r));
        let xv = self.value(x).clone();
        let mut data = vec![0.0; b * c * r * r];
        for bc in 0..b * c {
            let src = &xv.data()[bc * sh * sw..(bc + 1) * sh * sw];
            let dst = &mut data[bc * r * r..(bc + 1) * r * r];
            for oy in 0..r {
                let (y0, y1, wy) = taps[oy];
                for ox in 0..r {
                    let (x0, x1, wx) = taps[ox];
                    let v00 = src[y0 * sw + x0];
                    let v01 = src[y0 * sw + x1];
                    let v10 = src[y1 * sw + x0];
                    let v11 = src[y1 * sw + x1];
                    dst[oy * r + ox] = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                }
            }
        }
        let out = Tensor::from_vec(vec![b, c, r, r], data);
        let taps2 = Arc::clone(&taps);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; b * c * sh * sw];
            for bc in 0..b * c {
                let gsrc = &g.data()[bc * r * r..(bc + 1) * r * r];
                let gdst = &mut gx[bc * sh * sw..(bc + 1) * sh * sw];
                for oy in 0..r {
                    let (y0, y1, wy) = taps2[oy];
                    for ox in 0..r {
                        let (x0, x1, wx) = taps2[ox];
                        let gv = gsrc[oy * r + ox];
                        gdst[y0 * sw + x0] += gv * (1.0 - wy) * (1.0 - wx);
                        gdst[y0 * sw + x1] += gv * (1.0 - wy) * wx;
                        gdst[y1 * sw + x0] += gv * wy * (1.0 - wx);
                        gdst[y1 * sw + x1] += gv * wy * wx;
                    }
                }
            }
            vec![(x, Tensor::from_vec(vec![b, c, sh, sw], gx))]
        })
    }

    /// Non-overlapping patch extraction: [B,C,R,R] -> [B,(R/p)^2, C*p*p].
    pub fn patchify(&mut self, x: VarId, p: usize) -> VarId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4, "patchify expects [B,C,R,R]");
        let (b, c, rh, rw) = (s[0], s[1], s[2], s[3]);
        assert!(rh % p == 0 && rw % p == 0, "patch size must divide image");
        let (gh, gw) = (rh / p, rw / p);
        let t = gh * gw;
        let pd = c * p * p;
        let xv = self.value(x).clone();
        let mut data = vec![0.0; b * t * pd];
        for bi in 0..b {
            for ty in 0..gh {
                for tx in 0..gw {
                    let tok = ty * gw + tx;
                    for ch in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                data[(bi * t + tok) * pd + (ch * p + py) * p + px] = xv.data()
                                    [((bi * c + ch) * rh + ty * p + py) * rw + tx * p + px];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![b, t, pd], data);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; b * c * rh * rw];
            for bi in 0..b {
                for ty in 0..gh {
                    for tx in 0..gw {
                        let tok = ty * gw + tx;
                        for ch in 0..c {
                            for py in 0..p {
                                for px in 0..p {
                                    gx[((bi * c + ch) * rh + ty * p + py) * rw + tx * p + px] =
                                        g.data()[(bi * t + tok) * pd + (ch * p + py) * p + px];
                                }
                            }
                        }
                    }
                }
            }
            vec![(x, Tensor::from_vec(vec![b, c, rh, rw], gx))]
        })
    }

    /// Layer norm over the last dim with affine parameters.
    pub fn layernorm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().expect("layernorm on empty shape");
        let rows = self.value(x).numel() / d;
        assert_eq!(self.value(gamma).shape(), &[d]);
        assert_eq!(self.value(beta).shape(), &[d]);
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; rows * d];
        for i in 0..rows {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                data[i * d + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let out = Tensor::from_vec(shape.clone(), data);
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        self.push(out, &[x, gamma, beta], move |g| {
            let mut gx = vec![0.0; rows * d];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for i in 0..rows {
                let grow = &g.data()[i * d..(i + 1) * d];
                let xh = &xhat[i * d..(i + 1) * d];
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..d {
                    let dxh = grow[j] * gv.data()[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xh[j];
                    ggamma[j] += grow[j] * xh[j];
                    gbeta[j] += grow[j];
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;
                for j in 0..d {
                    let dxh = grow[j] * gv.data()[j];
                    gx[i * d + j] = inv_std[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                }
            }
            vec![
                (x, Tensor::from_vec(shape.clone(), gx)),
                (gamma, Tensor::from_vec(vec![d], ggamma)),
                (beta, Tensor::from_vec(vec![d], gbeta)),
            ]
        })
    }

    /// Softmax along the last dim of any shape.
    pub fn softmax_lastdim(&mut self, x: VarId) -> VarId {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().expect("softmax on empty shape");
        let rows = self.value(x).numel() / d;
        let xv = self.value(x).clone();
        let mut data = vec![0.0; rows * d];
        for i in 0..rows {
            let row = &xv.data()[i * d..(i + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                data[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                data[i * d + j] /= sum;
            }
        }
        let out = Tensor::from_vec(shape.clone(), data);
        let y = out.clone();
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; rows * d];
            for i in 0..rows {
                let yr = &y.data()[i * d..(i + 1) * d];
                let gr = &g.data()[i * d..(i + 1) * d];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gx[i * d + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(x, Tensor::from_vec(shape.clone(), gx))]
        })
    }

    /// Batched matmul: [G,M,K] x [G,K,N] -> [G,M,N].
    pub fn bmm(&mut self, a: VarId, b: VarId) -> VarId {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert!(sa.len() == 3 && sb.len() == 3, "bmm expects rank-3 tensors");
        let (gn, m, k) = (sa[0], sa[1], sa[2]);
        assert_eq!(sb[0], gn, "bmm group mismatch");
        assert_eq!(sb[1], k, "bmm inner dim mismatch");
        let n = sb[2];
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        let mut data = vec![0.0; gn * m * n];
        for grp in 0..gn {
            let block = super::ops::matmul_kernel(
                Exec::auto(),
                &va.data()[grp * m * k..(grp + 1) * m * k],
                &vb.data()[grp * k * n..(grp + 1) * k * n],
                m,
                k,
                n,
            );
            data[grp * m * n..(grp + 1) * m * n].copy_from_slice(&block);
        }
        let out = Tensor::from_vec(vec![gn, m, n], data);
        self.push(out, &[a, b], move |g| {
            let mut ga = vec![0.0; gn * m * k];
            let mut gb = vec![0.0; gn * k * n];
            for grp in 0..gn {
                let gg = &g.data()[grp * m * n..(grp + 1) * m * n];
                let av = &va.data()[grp * m * k..(grp + 1) * m * k];
                let bv = &vb.data()[grp * k * n..(grp + 1) * k * n];
                // dA = G B^T
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gg[i * n + j] * bv[kk * n + j];
                        }
                        ga[grp * m * k + i * k + kk] = acc;
                    }
                }
                // dB = A^T G
                for kk in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += av[i * k + kk] * gg[i * n + j];
                        }
                        gb[grp * k * n + kk * n + j] = acc;
                    }
                }
            }
            vec![
                (a, Tensor::from_vec(vec![gn, m, k], ga)),
                (b, Tensor::from_vec(vec![gn, k, n], gb)),
            ]
        })
    }

    /// Materializing axis permutation (any rank up to 6).
    pub fn permute(&mut self, x: VarId, perm: &[usize]) -> VarId {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(perm.len(), shape.len(), "permute rank mismatch");
        let out = permute_tensor(self.value(x), perm);
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.push(out, &[x], move |g| {
            vec![(x, permute_tensor(g, &inverse))]
        })
    }

    /// Prepend a learned row to every sequence: [B,T,D] + [D] -> [B,T+1,D].
    pub fn prepend_row(&mut self, x: VarId, row: VarId) -> VarId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "prepend_row expects [B,T,D]");
        let (b, t, d) = (s[0], s[1], s[2]);
        assert_eq!(self.value(row).shape(), &[d]);
        let rv = self.value(row).clone();
        let xv = self.value(x).clone();
        let mut data = vec![0.0; b * (t + 1) * d];
        for bi in 0..b {
            data[bi * (t + 1) * d..bi * (t + 1) * d + d].copy_from_slice(rv.data());
            data[bi * (t + 1) * d + d..(bi + 1) * (t + 1) * d]
                .copy_from_slice(&xv.data()[bi * t * d..(bi + 1) * t * d]);
        }
        let out = Tensor::from_vec(vec![b, t + 1, d], data);
        self.push(out, &[x, row], move |g| {
            let mut gx = vec![0.0; b * t * d];
            let mut grow = vec![0.0; d];
            for bi in 0..b {
                for j in 0..d {
                    grow[j] += g.data()[bi * (t + 1) * d + j];
                }
                gx[bi * t * d..(bi + 1) * t * d]
                    .copy_from_slice(&g.data()[bi * (t + 1) * d + d..(bi + 1) * (t + 1) * d]);
            }
            vec![
                (x, Tensor::from_vec(vec![b, t, d], gx)),
                (row, Tensor::from_vec(vec![d], grow)),
            ]
        })
    }

    /// Select one token from every sequence: [B,T,D] -> [B,D].
    pub fn take_token(&mut self, x: VarId, index: usize) -> VarId {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 3, "take_token expects [B,T,D]");
        let (b, t, d) = (s[0], s[1], s[2]);
        assert!(index < t);
        let xv = self.value(x).clone();
        let mut data = vec![0.0; b * d];
        for bi in 0..b {
            data[bi * d..(bi + 1) * d]
                .copy_from_slice(&xv.data()[(bi * t + index) * d..(bi * t + index + 1) * d]);
        }
        let out = Tensor::from_vec(vec![b, d], data);
        self.push(out, &[x], move |g| {
            let mut gx = vec![0.0; b * t * d];
            for bi in 0..b {
                gx[(bi * t + index) * d..(bi * t + index + 1) * d]
                    .copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
            }
            vec![(x, Tensor::from_vec(vec![b, t, d], gx))]
        })
    }

    /// Broadcast add over the leading dim: [B,T,D] + [T,D].
    pub fn add_broadcast_tail(&mut self, x: VarId, y: VarId) -> VarId {
        let sx = self.value(x).shape().to_vec();
        let sy = self.value(y).shape().to_vec();
        assert!(sx.len() == sy.len() + 1 && sx[1..] == sy[..], "broadcast shape mismatch");
        let b = sx[0];
        let per = self.value(y).numel();
        let yv = self.value(y).clone();
        let mut out = self.value(x).clone();
        {
            let d = out.data_mut();
            for bi in 0..b {
                for j in 0..per {
                    d[bi * per + j] += yv.data()[j];
                }
            }
        }
        self.push(out, &[x, y], move |g| {
            let mut gy = vec![0.0; per];
            for bi in 0..b {
                for j in 0..per {
                    gy[j] += g.data()[bi * per + j];
                }
            }
            vec![(x, g.clone()), (y, Tensor::from_vec(sy.clone(), gy))]
        })
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; t.numel()];
    let mut idx = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        // Decompose o into out-coords, map through perm to input offset.
        let mut rem = o;
        for (i, &dim) in out_shape.iter().enumerate().rev() {
            idx[i] = rem % dim;
            rem /= dim;
        }
        let mut off = 0;
        for i in 0..rank {
            off += idx[i] * in_strides[perm[i]];
        }
        *slot = t.data()[off];
    }
    Tensor::from_vec(out_shape, out)
}

/// Source taps for half-pixel-center bilinear resize along one axis.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
            let clamped = pos.clamp(0.0, (src - 1) as f64);
            let lo = clamped.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, clamped - lo as f64)
        })
        .collect()
}
