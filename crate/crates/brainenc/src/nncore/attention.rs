//! Multi-head and axial attention.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::layers::{make_dropout_mask, normal_param};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Boolean visibility mask over `[q, k]`: `true` = may attend.
pub fn causal_mask(len: usize) -> Arc<Vec<bool>> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    Arc::new(m)
}

pub fn full_mask(q_len: usize, k_len: usize) -> Arc<Vec<bool>> {
    Arc::new(vec![true; q_len * k_len])
}

/// Scaled dot-product attention split across heads.
///
/// Queries project to `d_qk`, keys to `d_qk`, values to `d_v`; the
/// concatenated head outputs go through the `fc` output projection back to
/// `d_out`. Self-attention uses one width everywhere; the cross-attention
/// variant keeps key/value widths tied to the conditioning stream.
pub struct MultiHeadAttention {
    pub w_qs: Tensor,
    pub w_ks: Tensor,
    pub w_vs: Tensor,
    pub fc: Tensor,
    pub heads: usize,
    d_qk: usize,
    d_v: usize,
}

#[derive(Default)]
pub struct AttnOpts<'r> {
    pub mask: Option<Arc<Vec<bool>>>,
    /// Attention-matrix dropout; `None` at inference.
    pub dropout: Option<(f64, &'r mut ChaCha8Rng)>,
}


impl MultiHeadAttention {
    pub fn new(
        d_q_in: usize,
        d_kv_in: usize,
        d_qk: usize,
        d_v: usize,
        d_out: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_qk.is_multiple_of(heads) || !d_v.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "attention widths (qk={d_qk}, v={d_v}) must be divisible by heads={heads}"
            )));
        }
        let std = 0.02;
        Ok(MultiHeadAttention {
            w_qs: normal_param(vec![d_q_in, d_qk], std, rng),
            w_ks: normal_param(vec![d_kv_in, d_qk], std, rng),
            w_vs: normal_param(vec![d_kv_in, d_v], std, rng),
            fc: normal_param(vec![d_v, d_out], std, rng),
            heads,
            d_qk,
            d_v,
        })
    }

    pub fn self_attention(d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(d_model, d_model, d_model, d_model, d_model, heads, rng)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_qs, &self.w_ks, &self.w_vs, &self.fc]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_qs,
            &mut self.w_ks,
            &mut self.w_vs,
            &mut self.fc,
        ]
    }

    /// `q_in: [N, Sq, Dq]`, `kv_in: [N, Sk, Dkv]` -> `[N, Sq, d_out]`.
    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor, opts: AttnOpts<'_>) -> Tensor {
        let (n, sq) = (q_in.shape()[0], q_in.shape()[1]);
        let sk = kv_in.shape()[1];
        let h = self.heads;
        let dk = self.d_qk / h;
        let dv = self.d_v / h;

        let split = |x: &Tensor, s: usize, width: usize| {
            x.reshape(vec![n, s, h, width])
                .permute(&[0, 2, 1, 3])
                .reshape(vec![n * h, s, width])
        };
        let q = split(&q_in.affine(&self.w_qs, None), sq, dk);
        let k = split(&kv_in.affine(&self.w_ks, None), sk, dk);
        let v = split(&kv_in.affine(&self.w_vs, None), sk, dv);

        let scores = q.bmm_nt(&k).scale(1.0 / (dk as f64).sqrt());
        let mut weights = match &opts.mask {
            Some(m) => scores.masked_softmax_last(m),
            None => scores.softmax(2),
        };
        if let Some((p, rng)) = opts.dropout {
            if p > 0.0 {
                weights = weights.dropout_mask(make_dropout_mask(weights.len(), p, rng));
            }
        }
        let out = weights.bmm(&v);
        out.reshape(vec![n, h, sq, dv])
            .permute(&[0, 2, 1, 3])
            .reshape(vec![n, sq, self.d_v])
            .affine(&self.fc, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis3 {
    Temporal,
    Height,
    Width,
}

/// Run attention along one axis of `x[B,T,H,W,C]`; every other coordinate
/// behaves as batch.
pub fn axial_forward(
    attn: &MultiHeadAttention,
    x: &Tensor,
    axis: Axis3,
    opts: AttnOpts<'_>,
) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 5, "axial attention expects [B,T,H,W,C]");
    let (b, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
    match axis {
        Axis3::Width => {
            let seq = x.reshape(vec![b * t * h, w, c]);
            attn.forward(&seq, &seq, opts).reshape(vec![b, t, h, w, c])
        }
        Axis3::Height => {
            let seq = x.permute(&[0, 1, 3, 2, 4]).reshape(vec![b * t * w, h, c]);
            attn.forward(&seq, &seq, opts)
                .reshape(vec![b, t, w, h, c])
                .permute(&[0, 1, 3, 2, 4])
        }
        Axis3::Temporal => {
            let seq = x.permute(&[0, 2, 3, 1, 4]).reshape(vec![b * h * w, t, c]);
            attn.forward(&seq, &seq, opts)
                .reshape(vec![b, h, w, t, c])
                .permute(&[0, 3, 1, 2, 4])
        }
    }
}

/// One attention net per axis; the combined form sums the three outputs.
pub struct AxialBlock {
    pub temporal: MultiHeadAttention,
    pub height: MultiHeadAttention,
    pub width: MultiHeadAttention,
}

impl AxialBlock {
    pub fn new(d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(AxialBlock {
            temporal: MultiHeadAttention::self_attention(d_model, heads, rng)?,
            height: MultiHeadAttention::self_attention(d_model, heads, rng)?,
            width: MultiHeadAttention::self_attention(d_model, heads, rng)?,
        })
    }

    /// Sum of the three axial attentions. `causal` adds a per-axis causal
    /// mask (raster-order respecting on every axis).
    pub fn forward(
        &self,
        x: &Tensor,
        causal: bool,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Tensor {
        let s = x.shape();
        let (t, h, w) = (s[1], s[2], s[3]);
        let mk = |len: usize| causal.then(|| causal_mask(len));
        let mut run = |attn: &MultiHeadAttention, axis: Axis3, len: usize| {
            let opts = AttnOpts {
                mask: mk(len),
                dropout: dropout.as_mut().map(|(p, rng)| (*p, &mut **rng)),
            };
            axial_forward(attn, x, axis, opts)
        };
        let a = run(&self.temporal, Axis3::Temporal, t);
        let b = run(&self.height, Axis3::Height, h);
        let c = run(&self.width, Axis3::Width, w);
        a.add(&b).add(&c)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.temporal.params();
        p.extend(self.height.params());
        p.extend(self.width.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.temporal.params_mut();
        p.extend(self.height.params_mut());
        p.extend(self.width.params_mut());
        p
    }
}
