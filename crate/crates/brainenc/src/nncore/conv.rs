//! Same-padded 3-D convolution and its transposed variant.
//!
//! Forward conv lowers each batch item to an im2col matrix and runs one
//! dgemm; the transposed conv runs the dgemm first and scatters. Output
//! spatial size is `ceil(input / stride)` per axis for the forward map and
//! `input * stride` for the transpose, so the two invert each other's
//! shape map.

use rayon::prelude::*;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{make_node, Tensor};

#[derive(Debug, Clone, Copy)]
struct AxisPlan {
    size: usize,
    out: usize,
    stride: usize,
    kernel: usize,
    pad_front: usize,
}

fn same_axis(size: usize, kernel: usize, stride: usize) -> AxisPlan {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(size);
    AxisPlan {
        size,
        out,
        stride,
        kernel,
        pad_front: total / 2,
    }
}

fn im2col(
    x: &[f64],
    t: AxisPlan,
    h: AxisPlan,
    w: AxisPlan,
    ci: usize,
    col: &mut [f64],
) {
    let cols = t.kernel * h.kernel * w.kernel * ci;
    let mut row = 0usize;
    for to in 0..t.out {
        for ho in 0..h.out {
            for wo in 0..w.out {
                let base = row * cols;
                let mut c = 0usize;
                for dt in 0..t.kernel {
                    let it = (to * t.stride + dt) as isize - t.pad_front as isize;
                    for dh in 0..h.kernel {
                        let ih = (ho * h.stride + dh) as isize - h.pad_front as isize;
                        for dw in 0..w.kernel {
                            let iw = (wo * w.stride + dw) as isize - w.pad_front as isize;
                            let dst = &mut col[base + c..base + c + ci];
                            if it >= 0
                                && (it as usize) < t.size
                                && ih >= 0
                                && (ih as usize) < h.size
                                && iw >= 0
                                && (iw as usize) < w.size
                            {
                                let src = ((it as usize * h.size + ih as usize) * w.size
                                    + iw as usize)
                                    * ci;
                                dst.copy_from_slice(&x[src..src + ci]);
                            } else {
                                dst.fill(0.0);
                            }
                            c += ci;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add column gradients back onto the input.
fn col2im(
    dcol: &[f64],
    t: AxisPlan,
    h: AxisPlan,
    w: AxisPlan,
    ci: usize,
    dx: &mut [f64],
) {
    let cols = t.kernel * h.kernel * w.kernel * ci;
    let mut row = 0usize;
    for to in 0..t.out {
        for ho in 0..h.out {
            for wo in 0..w.out {
                let base = row * cols;
                let mut c = 0usize;
                for dt in 0..t.kernel {
                    let it = (to * t.stride + dt) as isize - t.pad_front as isize;
                    for dh in 0..h.kernel {
                        let ih = (ho * h.stride + dh) as isize - h.pad_front as isize;
                        for dw in 0..w.kernel {
                            let iw = (wo * w.stride + dw) as isize - w.pad_front as isize;
                            if it >= 0
                                && (it as usize) < t.size
                                && ih >= 0
                                && (ih as usize) < h.size
                                && iw >= 0
                                && (iw as usize) < w.size
                            {
                                let dst = ((it as usize * h.size + ih as usize) * w.size
                                    + iw as usize)
                                    * ci;
                                for j in 0..ci {
                                    dx[dst + j] += dcol[base + c + j];
                                }
                            }
                            c += ci;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl Tensor {
    /// Same-padded strided conv: `x[B,T,H,W,Ci] * k[kt,kh,kw,Ci,Co]`.
    pub fn conv3d_same(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize, usize),
    ) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 5, "conv3d expects [B,T,H,W,Ci]");
        let ks = kernel.shape();
        assert_eq!(ks.len(), 5, "conv3d kernel must be [kt,kh,kw,Ci,Co]");
        let (b, ci) = (s[0], s[4]);
        assert_eq!(ks[3], ci, "conv3d: channel mismatch");
        let co = ks[4];
        let tp = same_axis(s[1], ks[0], stride.0);
        let hp = same_axis(s[2], ks[1], stride.1);
        let wp = same_axis(s[3], ks[2], stride.2);
        let rows = tp.out * hp.out * wp.out;
        let cols = ks[0] * ks[1] * ks[2] * ci;
        let in_sz = s[1] * s[2] * s[3] * ci;
        let out_sz = rows * co;

        let mut out = vec![0.0; b * out_sz];
        out.par_chunks_mut(out_sz).enumerate().for_each(|(bi, ob)| {
            let mut col = vec![0.0; rows * cols];
            im2col(&self.data()[bi * in_sz..(bi + 1) * in_sz], tp, hp, wp, ci, &mut col);
            gemm_nn(rows, cols, co, &col, kernel.data(), 0.0, ob);
            if let Some(bias) = bias {
                let bd = bias.data();
                for r in ob.chunks_mut(co) {
                    for (o, v) in r.iter_mut().zip(bd) {
                        *o += v;
                    }
                }
            }
        });

        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(bias) = bias {
            assert_eq!(bias.len(), co, "conv3d: bias width mismatch");
            parents.push(bias.clone());
        }
        let has_bias = bias.is_some();
        make_node(
            vec![b, tp.out, hp.out, wp.out, co],
            out,
            parents,
            Box::new(move |inner, g| {
                let x = inner.parents[0].data();
                let k = inner.parents[1].data();
                let mut dx = vec![0.0; b * in_sz];
                // Per-item kernel partials reduced in batch order.
                let partials: Vec<Vec<f64>> = dx
                    .par_chunks_mut(in_sz)
                    .enumerate()
                    .map(|(bi, dxb)| {
                        let gb = &g[bi * out_sz..(bi + 1) * out_sz];
                        let mut dcol = vec![0.0; rows * cols];
                        gemm_nt(rows, co, cols, gb, k, 0.0, &mut dcol);
                        col2im(&dcol, tp, hp, wp, ci, dxb);
                        let mut col = vec![0.0; rows * cols];
                        im2col(&x[bi * in_sz..(bi + 1) * in_sz], tp, hp, wp, ci, &mut col);
                        let mut dk = vec![0.0; cols * co];
                        gemm_tn(cols, rows, co, &col, gb, 0.0, &mut dk);
                        dk
                    })
                    .collect();
                let mut dk = vec![0.0; cols * co];
                for p in &partials {
                    for (a, v) in dk.iter_mut().zip(p) {
                        *a += v;
                    }
                }
                let mut grads = vec![Some(dx), Some(dk)];
                if has_bias {
                    let mut db = vec![0.0; co];
                    for r in g.chunks(co) {
                        for (a, v) in db.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    grads.push(Some(db));
                }
                grads
            }),
        )
    }

    /// Transposed same-padded conv: `x[B,t,h,w,Ci] * k[Ci,kt,kh,kw,Co]`,
    /// output `[B, t*st, h*sh, w*sw, Co]`. Kernel extent must be at least
    /// the stride on each axis.
    pub fn conv3d_transpose_same(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize, usize),
    ) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 5, "conv3d_transpose expects [B,t,h,w,Ci]");
        let ks = kernel.shape();
        assert_eq!(ks.len(), 5, "transpose kernel must be [Ci,kt,kh,kw,Co]");
        let (b, ci) = (s[0], s[4]);
        assert_eq!(ks[0], ci, "conv3d_transpose: channel mismatch");
        let (kt, kh, kw, co) = (ks[1], ks[2], ks[3], ks[4]);
        assert!(kt >= stride.0 && kh >= stride.1 && kw >= stride.2,
            "transpose kernel must cover the stride");
        let (t, h, w) = (s[1], s[2], s[3]);
        let (ot, oh, ow) = (t * stride.0, h * stride.1, w * stride.2);
        let pads = ((kt - stride.0) / 2, (kh - stride.1) / 2, (kw - stride.2) / 2);
        let cells = t * h * w;
        let kcols = kt * kh * kw * co;
        let in_sz = cells * ci;
        let out_sz = ot * oh * ow * co;

        let scatter = |colbuf: &[f64], ob: &mut [f64]| {
            let mut cell = 0usize;
            for it in 0..t {
                for ih in 0..h {
                    for iw in 0..w {
                        let base = cell * kcols;
                        let mut c = 0usize;
                        for dt in 0..kt {
                            let to = (it * stride.0 + dt) as isize - pads.0 as isize;
                            for dh in 0..kh {
                                let ho = (ih * stride.1 + dh) as isize - pads.1 as isize;
                                for dw in 0..kw {
                                    let wo = (iw * stride.2 + dw) as isize - pads.2 as isize;
                                    if to >= 0
                                        && (to as usize) < ot
                                        && ho >= 0
                                        && (ho as usize) < oh
                                        && wo >= 0
                                        && (wo as usize) < ow
                                    {
                                        let dst = ((to as usize * oh + ho as usize) * ow
                                            + wo as usize)
                                            * co;
                                        for j in 0..co {
                                            ob[dst + j] += colbuf[base + c + j];
                                        }
                                    }
                                    c += co;
                                }
                            }
                        }
                        cell += 1;
                    }
                }
            }
        };

        let mut out = vec![0.0; b * out_sz];
        out.par_chunks_mut(out_sz).enumerate().for_each(|(bi, ob)| {
            let xb = &self.data()[bi * in_sz..(bi + 1) * in_sz];
            let mut colbuf = vec![0.0; cells * kcols];
            gemm_nn(cells, ci, kcols, xb, kernel.data(), 0.0, &mut colbuf);
            scatter(&colbuf, ob);
            if let Some(bias) = bias {
                let bd = bias.data();
                for r in ob.chunks_mut(co) {
                    for (o, v) in r.iter_mut().zip(bd) {
                        *o += v;
                    }
                }
            }
        });

        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(bias) = bias {
            assert_eq!(bias.len(), co, "conv3d_transpose: bias width mismatch");
            parents.push(bias.clone());
        }
        let has_bias = bias.is_some();
        let stride_c = stride;
        make_node(
            vec![b, ot, oh, ow, co],
            out,
            parents,
            Box::new(move |inner, g| {
                let x = inner.parents[0].data();
                let k = inner.parents[1].data();
                // Gather dOut back into column layout (adjoint of scatter).
                let gather = |gb: &[f64], dcol: &mut [f64]| {
                    let mut cell = 0usize;
                    for it in 0..t {
                        for ih in 0..h {
                            for iw in 0..w {
                                let base = cell * kcols;
                                let mut c = 0usize;
                                for dt in 0..kt {
                                    let to =
                                        (it * stride_c.0 + dt) as isize - pads.0 as isize;
                                    for dh in 0..kh {
                                        let ho = (ih * stride_c.1 + dh) as isize
                                            - pads.1 as isize;
                                        for dw in 0..kw {
                                            let wo = (iw * stride_c.2 + dw) as isize
                                                - pads.2 as isize;
                                            if to >= 0
                                                && (to as usize) < ot
                                                && ho >= 0
                                                && (ho as usize) < oh
                                                && wo >= 0
                                                && (wo as usize) < ow
                                            {
                                                let src = ((to as usize * oh + ho as usize)
                                                    * ow
                                                    + wo as usize)
                                                    * co;
                                                dcol[base + c..base + c + co]
                                                    .copy_from_slice(&gb[src..src + co]);
                                            } else {
                                                dcol[base + c..base + c + co].fill(0.0);
                                            }
                                            c += co;
                                        }
                                    }
                                }
                                cell += 1;
                            }
                        }
                    }
                };
                let mut dx = vec![0.0; b * in_sz];
                let partials: Vec<Vec<f64>> = dx
                    .par_chunks_mut(in_sz)
                    .enumerate()
                    .map(|(bi, dxb)| {
                        let gb = &g[bi * out_sz..(bi + 1) * out_sz];
                        let mut dcol = vec![0.0; cells * kcols];
                        gather(gb, &mut dcol);
                        gemm_nt(cells, kcols, ci, &dcol, k, 0.0, dxb);
                        let mut dk = vec![0.0; ci * kcols];
                        gemm_tn(ci, cells, kcols, &x[bi * in_sz..(bi + 1) * in_sz], &dcol, 0.0, &mut dk);
                        dk
                    })
                    .collect();
                let mut dk = vec![0.0; ci * kcols];
                for p in &partials {
                    for (a, v) in dk.iter_mut().zip(p) {
                        *a += v;
                    }
                }
                let mut grads = vec![Some(dx), Some(dk)];
                if has_bias {
                    let mut db = vec![0.0; co];
                    for r in g.chunks(co) {
                        for (a, v) in db.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    grads.push(Some(db));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::grad;
    use proptest::prelude::*;

    /// Direct nested-loop convolution with the same same-padding rule.
    /// Oracle only; never on the hot path.
    fn naive_conv3d(
        x: &[f64],
        (t, h, w, ci): (usize, usize, usize, usize),
        k: &[f64],
        (kt, kh, kw, co): (usize, usize, usize, usize),
        stride: (usize, usize, usize),
    ) -> (Vec<f64>, (usize, usize, usize)) {
        let ot = t.div_ceil(stride.0);
        let oh = h.div_ceil(stride.1);
        let ow = w.div_ceil(stride.2);
        let pt = (((ot - 1) * stride.0 + kt).saturating_sub(t)) / 2;
        let ph = (((oh - 1) * stride.1 + kh).saturating_sub(h)) / 2;
        let pw = (((ow - 1) * stride.2 + kw).saturating_sub(w)) / 2;
        let mut out = vec![0.0; ot * oh * ow * co];
        for to in 0..ot {
            for ho in 0..oh {
                for wo in 0..ow {
                    for c_out in 0..co {
                        let mut acc = 0.0;
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let it = (to * stride.0 + dt) as isize - pt as isize;
                                    let ih = (ho * stride.1 + dh) as isize - ph as isize;
                                    let iw = (wo * stride.2 + dw) as isize - pw as isize;
                                    if it < 0
                                        || ih < 0
                                        || iw < 0
                                        || it as usize >= t
                                        || ih as usize >= h
                                        || iw as usize >= w
                                    {
                                        continue;
                                    }
                                    for c_in in 0..ci {
                                        let xv = x[((it as usize * h + ih as usize) * w
                                            + iw as usize)
                                            * ci
                                            + c_in];
                                        let kv = k[(((dt * kh + dh) * kw + dw) * ci + c_in)
                                            * co
                                            + c_out];
                                        acc += xv * kv;
                                    }
                                }
                            }
                        }
                        out[((to * oh + ho) * ow + wo) * co + c_out] = acc;
                    }
                }
            }
        }
        (out, (ot, oh, ow))
    }

    fn rng_vec(n: usize, seed: &mut u64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                *seed ^= *seed << 13;
                *seed ^= *seed >> 7;
                *seed ^= *seed << 17;
                (*seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn identity_kernel_stride_one() {
        let x = Tensor::from_vec(vec![1, 2, 3, 3, 1], (0..18).map(|v| v as f64).collect());
        let k = Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![1.0]);
        let y = x.conv3d_same(&k, None, (1, 1, 1));
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn downsample_shape_map() {
        // (16,32,32) under stride (4,4,4) -> (4,8,8)
        let x = Tensor::zeros(vec![1, 16, 32, 32, 2]);
        let k = Tensor::zeros(vec![4, 4, 4, 2, 3]);
        let y = x.conv3d_same(&k, None, (4, 4, 4));
        assert_eq!(y.shape(), &[1, 4, 8, 8, 3]);
    }

    #[test]
    fn transpose_inverts_shape_map() {
        let x = Tensor::zeros(vec![1, 4, 8, 8, 3]);
        let k = Tensor::zeros(vec![3, 4, 4, 4, 2]);
        let y = x.conv3d_transpose_same(&k, None, (4, 4, 4));
        assert_eq!(y.shape(), &[1, 16, 32, 32, 2]);
        let k2 = Tensor::zeros(vec![3, 4, 4, 4, 2]);
        let y2 = Tensor::zeros(vec![1, 2, 4, 4, 3]).conv3d_transpose_same(&k2, None, (2, 2, 2));
        assert_eq!(y2.shape(), &[1, 4, 8, 8, 2]);
    }

    #[test]
    fn matches_naive_loops() {
        let mut seed = 42u64;
        for &(dims, kdims, stride) in &[
            ((3, 4, 5, 2), (2, 3, 3, 3), (1, 2, 2)),
            ((4, 8, 8, 3), (4, 4, 4, 2), (4, 4, 4)),
            ((2, 5, 5, 1), (3, 3, 3, 2), (1, 1, 1)),
            ((4, 6, 6, 2), (2, 2, 2, 2), (2, 2, 2)),
        ] {
            let (t, h, w, ci) = dims;
            let (kt, kh, kw, co) = kdims;
            let x = rng_vec(t * h * w * ci, &mut seed);
            let k = rng_vec(kt * kh * kw * ci * co, &mut seed);
            let xt = Tensor::from_vec(vec![1, t, h, w, ci], x.clone());
            let kt_ = Tensor::from_vec(vec![kt, kh, kw, ci, co], k.clone());
            let y = xt.conv3d_same(&kt_, None, stride);
            let (want, (ot, oh, ow)) = naive_conv3d(&x, dims, &k, kdims, stride);
            assert_eq!(y.shape(), &[1, ot, oh, ow, co]);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut seed = 7u64;
        let (t, h, w, ci, co) = (2, 3, 3, 2, 2);
        let x0 = rng_vec(t * h * w * ci, &mut seed);
        let k0 = rng_vec(2 * 2 * 2 * ci * co, &mut seed);
        let wsum = rng_vec(t * h * w * co, &mut seed);

        let f = |xv: &[f64], kv: &[f64]| -> f64 {
            let x = Tensor::from_vec(vec![1, t, h, w, ci], xv.to_vec());
            let k = Tensor::from_vec(vec![2, 2, 2, ci, co], kv.to_vec());
            let y = x.conv3d_same(&k, None, (1, 1, 1));
            y.data()
                .iter()
                .zip(&wsum)
                .map(|(a, b)| a * b)
                .sum()
        };

        let x = Tensor::param(vec![1, t, h, w, ci], x0.clone());
        let k = Tensor::param(vec![2, 2, 2, ci, co], k0.clone());
        let wt = Tensor::from_vec(vec![1, t, h, w, co], wsum.clone());
        let loss = x.conv3d_same(&k, None, (1, 1, 1)).mul(&wt).sum_all();
        let grads = grad(&loss, &[&x, &k]).unwrap();

        let hstep = 1e-5;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p[i] += hstep;
            let mut m = x0.clone();
            m[i] -= hstep;
            let fd = (f(&p, &k0) - f(&m, &k0)) / (2.0 * hstep);
            let a = grads[0].data()[i];
            assert!((a - fd).abs() / fd.abs().max(1.0) < 1e-5, "{a} vs {fd}");
        }
        for i in 0..k0.len() {
            let mut p = k0.clone();
            p[i] += hstep;
            let mut m = k0.clone();
            m[i] -= hstep;
            let fd = (f(&x0, &p) - f(&x0, &m)) / (2.0 * hstep);
            let a = grads[1].data()[i];
            assert!((a - fd).abs() / fd.abs().max(1.0) < 1e-5, "{a} vs {fd}");
        }
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        let mut seed = 11u64;
        let (t, h, w, ci, co) = (2, 2, 2, 2, 1);
        let x0 = rng_vec(t * h * w * ci, &mut seed);
        let k0 = rng_vec(ci * 2 * 2 * 2 * co, &mut seed);
        let wsum = rng_vec(t * 2 * h * 2 * w * 2 * co, &mut seed);

        let x = Tensor::param(vec![1, t, h, w, ci], x0.clone());
        let k = Tensor::param(vec![ci, 2, 2, 2, co], k0.clone());
        let wt = Tensor::from_vec(vec![1, 2 * t, 2 * h, 2 * w, co], wsum.clone());
        let loss = x
            .conv3d_transpose_same(&k, None, (2, 2, 2))
            .mul(&wt)
            .sum_all();
        let grads = grad(&loss, &[&x, &k]).unwrap();

        let f = |xv: &[f64], kv: &[f64]| -> f64 {
            let x = Tensor::from_vec(vec![1, t, h, w, ci], xv.to_vec());
            let k = Tensor::from_vec(vec![ci, 2, 2, 2, co], kv.to_vec());
            let y = x.conv3d_transpose_same(&k, None, (2, 2, 2));
            y.data().iter().zip(&wsum).map(|(a, b)| a * b).sum()
        };
        let hstep = 1e-5;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p[i] += hstep;
            let mut m = x0.clone();
            m[i] -= hstep;
            let fd = (f(&p, &k0) - f(&m, &k0)) / (2.0 * hstep);
            let a = grads[0].data()[i];
            assert!((a - fd).abs() / fd.abs().max(1.0) < 1e-5, "{a} vs {fd}");
        }
        for i in 0..k0.len() {
            let mut p = k0.clone();
            p[i] += hstep;
            let mut m = k0.clone();
            m[i] -= hstep;
            let fd = (f(&x0, &p) - f(&x0, &m)) / (2.0 * hstep);
            let a = grads[1].data()[i];
            assert!((a - fd).abs() / fd.abs().max(1.0) < 1e-5, "{a} vs {fd}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn conv_equals_naive_on_small_shapes(
            t in 1usize..=4, h in 1usize..=8, w in 1usize..=8, ci in 1usize..=3,
            kt in 1usize..=3, kh in 1usize..=3, kw in 1usize..=3, co in 1usize..=2,
            st in 1usize..=2, seed in any::<u64>(),
        ) {
            let mut s = seed | 1;
            let x = rng_vec(t * h * w * ci, &mut s);
            let k = rng_vec(kt * kh * kw * ci * co, &mut s);
            let xt = Tensor::from_vec(vec![1, t, h, w, ci], x.clone());
            let ktens = Tensor::from_vec(vec![kt, kh, kw, ci, co], k.clone());
            let y = xt.conv3d_same(&ktens, None, (st, st, st));
            let (want, _) = naive_conv3d(&x, (t, h, w, ci), &k, (kt, kh, kw, co), (st, st, st));
            for (a, b) in y.data().iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
