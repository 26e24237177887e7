//! Differentiable primitive ops.
//!
//! Each op computes its output eagerly, then records a backward closure on
//! the implicit tape. Accumulations run in full precision; outputs pass
//! through the precision storage hook inside `make_node`. Parallel loops
//! only ever split over independent output elements with a fixed chunking,
//! so results are bit-identical for any thread count.

use std::sync::Arc;

use rayon::prelude::*;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{make_node, Tensor};
use crate::error::{Error, Result};

const PAR_MIN: usize = 1 << 15;
const PAR_CHUNK: usize = 1 << 13;

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    if a.len() >= PAR_MIN {
        out.par_chunks_mut(PAR_CHUNK)
            .zip(a.par_chunks(PAR_CHUNK).zip(b.par_chunks(PAR_CHUNK)))
            .for_each(|(o, (xa, xb))| {
                for i in 0..o.len() {
                    o[i] = f(xa[i], xb[i]);
                }
            });
    } else {
        for i in 0..a.len() {
            out[i] = f(a[i], b[i]);
        }
    }
    out
}

fn map(a: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    if a.len() >= PAR_MIN {
        out.par_chunks_mut(PAR_CHUNK)
            .zip(a.par_chunks(PAR_CHUNK))
            .for_each(|(o, xa)| {
                for i in 0..o.len() {
                    o[i] = f(xa[i]);
                }
            });
    } else {
        for i in 0..a.len() {
            out[i] = f(a[i]);
        }
    }
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = zip_map(self.data(), other.data(), |a, b| a + b);
        make_node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = zip_map(self.data(), other.data(), |a, b| a - b);
        make_node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data = zip_map(self.data(), other.data(), |a, b| a * b);
        make_node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|inner, g| {
                let a = inner.parents[0].data();
                let b = inner.parents[1].data();
                vec![
                    Some(zip_map(g, b, |gi, bi| gi * bi)),
                    Some(zip_map(g, a, |gi, ai| gi * ai)),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = map(self.data(), |a| a * c);
        make_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = map(self.data(), |a| a + c);
        make_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let data = map(self.data(), |x| {
            0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
        });
        make_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|inner, g| {
                let x = inner.parents[0].data();
                let dx = zip_map(g, x, |gi, xi| {
                    let t = (C * (xi + A * xi * xi * xi)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * xi * (1.0 - t * t) * C * (1.0 + 3.0 * A * xi * xi);
                    gi * d
                });
                vec![Some(dx)]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.len();
        make_node(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len();
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = self.data().iter().sum();
        make_node(
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.len(), "reshape: element count must match");
        // Row-major reshape is free: share the buffer.
        crate::nncore::tensor::reshape_shared(self, shape)
    }

    /// Axis permutation (data movement).
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let shape = self.shape().to_vec();
        assert_eq!(perm.len(), shape.len(), "permute: rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_raw(self.data(), &shape, perm);
        let perm_owned = perm.to_vec();
        make_node(
            out_shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut inv = vec![0usize; perm_owned.len()];
                for (i, &p) in perm_owned.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(permute_raw(g, &out_shape, &inv))]
            }),
        )
    }

    /// 2-D matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape().len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(other.shape().len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.data(), other.data(), 0.0, &mut out);
        make_node(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |inner, g| {
                let a = inner.parents[0].data();
                let b = inner.parents[1].data();
                let mut da = vec![0.0; m * k];
                gemm_nt(m, n, k, g, b, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                gemm_tn(k, m, n, a, g, 0.0, &mut db);
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Batched matmul `[G,m,k] @ [G,k,n]`.
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let (g_, m, k) = dims3(self.shape(), "bmm lhs");
        let (g2, k2, n) = dims3(other.shape(), "bmm rhs");
        assert_eq!(g_, g2, "bmm: batch sizes differ");
        assert_eq!(k, k2, "bmm: inner dimensions differ");
        let mut out = vec![0.0; g_ * m * n];
        {
            let a = self.data();
            let b = other.data();
            out.par_chunks_mut(m * n).enumerate().for_each(|(gi, c)| {
                gemm_nn(m, k, n, &a[gi * m * k..(gi + 1) * m * k], &b[gi * k * n..(gi + 1) * k * n], 0.0, c);
            });
        }
        make_node(
            vec![g_, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |inner, gr| {
                let a = inner.parents[0].data();
                let b = inner.parents[1].data();
                let mut da = vec![0.0; g_ * m * k];
                let mut db = vec![0.0; g_ * k * n];
                da.par_chunks_mut(m * k)
                    .zip(db.par_chunks_mut(k * n))
                    .enumerate()
                    .for_each(|(gi, (dab, dbb))| {
                        let gg = &gr[gi * m * n..(gi + 1) * m * n];
                        gemm_nt(m, n, k, gg, &b[gi * k * n..(gi + 1) * k * n], 0.0, dab);
                        gemm_tn(k, m, n, &a[gi * m * k..(gi + 1) * m * k], gg, 0.0, dbb);
                    });
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Batched matmul against a transposed rhs: `[G,m,k] @ [G,n,k]^T`.
    pub fn bmm_nt(&self, other: &Tensor) -> Tensor {
        let (g_, m, k) = dims3(self.shape(), "bmm_nt lhs");
        let (g2, n, k2) = dims3(other.shape(), "bmm_nt rhs");
        assert_eq!(g_, g2, "bmm_nt: batch sizes differ");
        assert_eq!(k, k2, "bmm_nt: inner dimensions differ");
        let mut out = vec![0.0; g_ * m * n];
        {
            let a = self.data();
            let b = other.data();
            out.par_chunks_mut(m * n).enumerate().for_each(|(gi, c)| {
                gemm_nt(m, k, n, &a[gi * m * k..(gi + 1) * m * k], &b[gi * n * k..(gi + 1) * n * k], 0.0, c);
            });
        }
        make_node(
            vec![g_, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |inner, gr| {
                let a = inner.parents[0].data();
                let b = inner.parents[1].data();
                let mut da = vec![0.0; g_ * m * k];
                let mut db = vec![0.0; g_ * n * k];
                da.par_chunks_mut(m * k)
                    .zip(db.par_chunks_mut(n * k))
                    .enumerate()
                    .for_each(|(gi, (dab, dbb))| {
                        let gg = &gr[gi * m * n..(gi + 1) * m * n];
                        gemm_nn(m, n, k, gg, &b[gi * n * k..(gi + 1) * n * k], 0.0, dab);
                        gemm_tn(n, m, k, gg, &a[gi * m * k..(gi + 1) * m * k], 0.0, dbb);
                    });
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Linear map over the last axis: `x[..., in] @ w[in, out] (+ b[out])`.
    pub fn affine(&self, w: &Tensor, b: Option<&Tensor>) -> Tensor {
        let shape = self.shape();
        let d_in = *shape.last().expect("affine: rank 0 input");
        assert_eq!(w.shape().len(), 2, "affine: weight must be 2-D");
        assert_eq!(w.shape()[0], d_in, "affine: weight rows must match input width");
        let d_out = w.shape()[1];
        let rows = self.len() / d_in;
        let mut out = vec![0.0; rows * d_out];
        // Fixed row chunking keeps the result independent of thread count.
        let chunk = 512usize;
        out.par_chunks_mut(chunk * d_out)
            .zip(self.data().par_chunks(chunk * d_in))
            .for_each(|(o, x)| {
                let r = x.len() / d_in;
                gemm_nn(r, d_in, d_out, x, w.data(), 0.0, o);
            });
        if let Some(bias) = b {
            assert_eq!(bias.len(), d_out, "affine: bias width mismatch");
            let bd = bias.data();
            for row in out.chunks_mut(d_out) {
                for (o, bi) in row.iter_mut().zip(bd.iter()) {
                    *o += bi;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(bias) = b {
            parents.push(bias.clone());
        }
        let has_bias = b.is_some();
        make_node(
            out_shape,
            out,
            parents,
            Box::new(move |inner, g| {
                let x = inner.parents[0].data();
                let wd = inner.parents[1].data();
                let mut dx = vec![0.0; rows * d_in];
                let chunk = 512usize;
                dx.par_chunks_mut(chunk * d_in)
                    .zip(g.par_chunks(chunk * d_out))
                    .for_each(|(o, gg)| {
                        let r = gg.len() / d_out;
                        gemm_nt(r, d_out, d_in, gg, wd, 0.0, o);
                    });
                let mut dw = vec![0.0; d_in * d_out];
                gemm_tn(d_in, rows, d_out, x, g, 0.0, &mut dw);
                let mut grads = vec![Some(dx), Some(dw)];
                if has_bias {
                    let mut db = vec![0.0; d_out];
                    for row in g.chunks(d_out) {
                        for (acc, gi) in db.iter_mut().zip(row) {
                            *acc += gi;
                        }
                    }
                    grads.push(Some(db));
                }
                grads
            }),
        )
    }

    /// Numerically stable softmax along `axis` (max subtraction, eps-guarded
    /// division).
    pub fn softmax(&self, axis: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "softmax: axis out of range");
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    mx = mx.max(x[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..axis_len {
                    let e = (x[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                // Max subtraction puts at least one exp(0) = 1 in the sum, so
                // the guard only bites on degenerate inputs.
                let denom = sum.max(1e-12);
                for j in 0..axis_len {
                    out[base + j * inner] /= denom;
                }
            }
        }
        make_node(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |inner_node, g| {
                let w = &inner_node.data;
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..axis_len {
                            let idx = base + j * inner;
                            dot += g[idx] * w[idx];
                        }
                        for j in 0..axis_len {
                            let idx = base + j * inner;
                            dx[idx] = w[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax over the last axis where `mask[q, k] == false` entries are
    /// excluded outright: they never enter the max or the sum and their
    /// weight is exactly 0.0, so masked-out inputs cannot perturb any bit of
    /// the surviving outputs.
    pub fn masked_softmax_last(&self, mask: &Arc<Vec<bool>>) -> Tensor {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        assert!(rank >= 2, "masked softmax needs [..., q, k]");
        let k_len = shape[rank - 1];
        let q_len = shape[rank - 2];
        assert_eq!(mask.len(), q_len * k_len, "mask shape mismatch");
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let m = Arc::clone(mask);
        out.par_chunks_mut(q_len * k_len)
            .enumerate()
            .for_each(|(b, ob)| {
                let xb = &x[b * q_len * k_len..(b + 1) * q_len * k_len];
                for q in 0..q_len {
                    let row = &xb[q * k_len..(q + 1) * k_len];
                    let mrow = &m[q * k_len..(q + 1) * k_len];
                    let orow = &mut ob[q * k_len..(q + 1) * k_len];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..k_len {
                        if mrow[j] {
                            mx = mx.max(row[j]);
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..k_len {
                        if mrow[j] {
                            let e = (row[j] - mx).exp();
                            orow[j] = e;
                            sum += e;
                        }
                    }
                    let denom = sum.max(1e-12);
                    for j in 0..k_len {
                        if mrow[j] {
                            orow[j] /= denom;
                        }
                    }
                }
            });
        let m2 = Arc::clone(mask);
        make_node(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |inner_node, g| {
                let w = &inner_node.data;
                let mut dx = vec![0.0; g.len()];
                dx.par_chunks_mut(q_len * k_len)
                    .enumerate()
                    .for_each(|(b, db)| {
                        let base = b * q_len * k_len;
                        for q in 0..q_len {
                            let mrow = &m2[q * k_len..(q + 1) * k_len];
                            let mut dot = 0.0;
                            for j in 0..k_len {
                                if mrow[j] {
                                    let idx = base + q * k_len + j;
                                    dot += g[idx] * w[idx];
                                }
                            }
                            for j in 0..k_len {
                                if mrow[j] {
                                    let idx = base + q * k_len + j;
                                    db[q * k_len + j] = w[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    });
                vec![Some(dx)]
            }),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        let d = *self.shape().last().expect("layer_norm: rank 0 input");
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        assert_eq!(gain.len(), d, "layer_norm: gain width mismatch");
        assert_eq!(bias.len(), d, "layer_norm: bias width mismatch");
        let rows = self.len() / d;
        let x = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut means = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_std[r] = inv;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        make_node(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |inner, g| {
                let x = inner.parents[0].data();
                let gd = inner.parents[1].data();
                let mut dx = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let inv = inv_std[r];
                    let mean = means[r];
                    let mut m1 = 0.0; // mean of dxhat
                    let mut m2 = 0.0; // mean of dxhat * xhat
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gd[j];
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gd[j];
                        dx[r * d + j] = inv * (dxhat - m1 - xhat * m2);
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }),
        )
    }

    /// Elementwise multiply by a fixed dropout mask (entries are 0 or
    /// 1/keep). The mask is sampled once by the caller, so repeated
    /// evaluation (e.g. finite differencing) sees identical noise.
    pub fn dropout_mask(&self, mask: Arc<Vec<f64>>) -> Tensor {
        assert_eq!(mask.len(), self.len(), "dropout mask length mismatch");
        let data = zip_map(self.data(), &mask, |x, m| x * m);
        make_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(zip_map(g, &mask, |gi, m| gi * m))]),
        )
    }

    /// Mean cross-entropy of `logits[N, C]` against integer targets.
    pub fn cross_entropy_mean(&self, targets: &Arc<Vec<usize>>) -> Result<Tensor> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "cross_entropy: logits must be [N, C]");
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(targets.len(), n, "cross_entropy: target count mismatch");
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidConfig(format!(
                "cross_entropy target {t} out of range for {c} classes"
            )));
        }
        let x = self.data();
        let mut total = 0.0;
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let t = Arc::clone(targets);
        Ok(make_node(
            vec![1],
            vec![total / n as f64],
            vec![self.clone()],
            Box::new(move |inner, g| {
                let x = inner.parents[0].data();
                let scale = g[0] / n as f64;
                let mut dx = vec![0.0; x.len()];
                dx.par_chunks_mut(c).enumerate().for_each(|(i, drow)| {
                    let row = &x[i * c..(i + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / sum;
                        drow[j] = scale * (p - if j == t[i] { 1.0 } else { 0.0 });
                    }
                });
                vec![Some(dx)]
            }),
        ))
    }

    /// Row gather from an embedding table: `out[i, :] = table[ids[i], :]`.
    /// The output shape is `ids_shape + [width]`.
    pub fn embedding(table: &Tensor, ids: Arc<Vec<usize>>, ids_shape: &[usize]) -> Tensor {
        assert_eq!(table.shape().len(), 2, "embedding table must be 2-D");
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let count: usize = ids_shape.iter().product();
        assert_eq!(ids.len(), count, "embedding ids shape mismatch");
        let td = table.data();
        let mut out = vec![0.0; count * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "embedding id {id} out of range");
            out[i * d..(i + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        make_node(
            shape,
            out,
            vec![table.clone()],
            Box::new(move |_, g| {
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
                vec![Some(dt)]
            }),
        )
    }

    /// Add per-axis position tables to `x[B,T,H,W,D]`:
    /// `out[b,t,h,w,:] = x + tt[t,:] + th[h,:] + tw[w,:]`.
    pub fn add_pos3(&self, tt: &Tensor, th: &Tensor, tw: &Tensor) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 5, "add_pos3 expects [B,T,H,W,D]");
        let (b, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);
        assert_eq!(tt.shape(), &[t, d], "temporal table shape");
        assert_eq!(th.shape(), &[h, d], "height table shape");
        assert_eq!(tw.shape(), &[w, d], "width table shape");
        let x = self.data();
        let (ttd, thd, twd) = (tt.data(), th.data(), tw.data());
        let mut out = vec![0.0; x.len()];
        let mut idx = 0;
        for _bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        for di in 0..d {
                            out[idx] = x[idx]
                                + ttd[ti * d + di]
                                + thd[hi * d + di]
                                + twd[wi * d + di];
                            idx += 1;
                        }
                    }
                }
            }
        }
        make_node(
            s.to_vec(),
            out,
            vec![self.clone(), tt.clone(), th.clone(), tw.clone()],
            Box::new(move |_, g| {
                let mut dt = vec![0.0; t * d];
                let mut dh = vec![0.0; h * d];
                let mut dw = vec![0.0; w * d];
                let mut idx = 0;
                for _bi in 0..b {
                    for ti in 0..t {
                        for hi in 0..h {
                            for wi in 0..w {
                                for di in 0..d {
                                    let gi = g[idx];
                                    dt[ti * d + di] += gi;
                                    dh[hi * d + di] += gi;
                                    dw[wi * d + di] += gi;
                                    idx += 1;
                                }
                            }
                        }
                    }
                }
                vec![Some(g.to_vec()), Some(dt), Some(dh), Some(dw)]
            }),
        )
    }

    /// Tile a leading batch axis of 1 up to `b` copies; the backward pass
    /// sums the per-copy gradients.
    pub fn tile_batch(&self, b: usize) -> Tensor {
        let s = self.shape();
        assert_eq!(s[0], 1, "tile_batch expects a leading batch axis of 1");
        let per = self.len();
        let mut data = Vec::with_capacity(per * b);
        for _ in 0..b {
            data.extend_from_slice(self.data());
        }
        let mut shape = s.to_vec();
        shape[0] = b;
        make_node(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![0.0; per];
                for chunk in g.chunks(per) {
                    for (a, v) in dx.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Overwrite every row of the flagged batch items in `x[B,S,D]` with a
    /// learned fill vector; used to splice a trainable null context into a
    /// batch of otherwise constant conditioning data.
    pub fn override_flagged_batches(&self, flags: Arc<Vec<bool>>, fill: &Tensor) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 3, "override_flagged_batches expects [B,S,D]");
        let (b, seq, d) = (s[0], s[1], s[2]);
        assert_eq!(flags.len(), b, "one flag per batch item");
        assert_eq!(fill.len(), d, "fill width mismatch");
        let mut out = self.data().to_vec();
        for (bi, &f) in flags.iter().enumerate() {
            if f {
                for i in 0..seq {
                    out[(bi * seq + i) * d..(bi * seq + i) * d + d]
                        .copy_from_slice(fill.data());
                }
            }
        }
        make_node(
            s.to_vec(),
            out,
            vec![self.clone(), fill.clone()],
            Box::new(move |_, g| {
                let mut dx = g.to_vec();
                let mut df = vec![0.0; d];
                for (bi, &f) in flags.iter().enumerate() {
                    if f {
                        for i in 0..seq {
                            let base = (bi * seq + i) * d;
                            for j in 0..d {
                                df[j] += g[base + j];
                                dx[base + j] = 0.0;
                            }
                        }
                    }
                }
                vec![Some(dx), Some(df)]
            }),
        )
    }

    /// Replace the first sequence cell of `x[B,S,D]` with a learned vector.
    pub fn replace_first_cell(&self, sos: &Tensor) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 3, "replace_first_cell expects [B,S,D]");
        let (b, seq, d) = (s[0], s[1], s[2]);
        assert_eq!(sos.len(), d, "sos width mismatch");
        let mut out = self.data().to_vec();
        for bi in 0..b {
            out[bi * seq * d..bi * seq * d + d].copy_from_slice(sos.data());
        }
        make_node(
            s.to_vec(),
            out,
            vec![self.clone(), sos.clone()],
            Box::new(move |_, g| {
                let mut dx = g.to_vec();
                let mut ds = vec![0.0; d];
                for bi in 0..b {
                    let base = bi * seq * d;
                    for j in 0..d {
                        ds[j] += g[base + j];
                        dx[base + j] = 0.0;
                    }
                }
                vec![Some(dx), Some(ds)]
            }),
        )
    }
}

fn dims3(shape: &[usize], what: &str) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "{what}: expected 3-D tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn permute_raw(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &c) in coords.iter().enumerate() {
            src += c * in_strides[perm[i]];
        }
        *slot = data[src];
        for i in (0..rank).rev() {
            coords[i] += 1;
            if coords[i] < out_shape[i] {
                break;
            }
            coords[i] = 0;
        }
    }
    out
}
