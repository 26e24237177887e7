//! Shared layer building blocks and parameter initialization.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Draw one standard normal via Box-Muller.
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_param(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal_f64(rng) * std).collect();
    Tensor::param(shape, data)
}

pub fn zeros_param(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![0.0; n])
}

/// Inverted dropout mask: entries are 0 with probability `p`, else 1/(1-p).
pub fn make_dropout_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Arc<Vec<f64>> {
    let scale = 1.0 / (1.0 - p);
    // One u32 word per element keeps mask generation off the profile.
    let thresh = (p * 4_294_967_296.0) as u64;
    Arc::new(
        (0..len)
            .map(|_| {
                if (rng.gen::<u32>() as u64) < thresh {
                    0.0
                } else {
                    scale
                }
            })
            .collect(),
    )
}

pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Linear {
        Linear {
            w: normal_param(vec![d_in, d_out], 0.02, rng),
            b: bias.then(|| zeros_param(vec![d_out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.affine(&self.w, self.b.as_ref())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.w];
        if let Some(b) = &self.b {
            p.push(b);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.w];
        if let Some(b) = &mut self.b {
            p.push(b);
        }
        p
    }
}

pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(width: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::param(vec![width], vec![1.0; width]),
            bias: zeros_param(vec![width]),
            eps: 1e-5,
        }
    }

    pub fn with_eps(width: usize, eps: f64) -> Result<LayerNorm> {
        if eps <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "layer norm eps must be positive, got {eps}"
            )));
        }
        let mut ln = LayerNorm::new(width);
        ln.eps = eps;
        Ok(ln)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Same-padded 3-D convolution layer. Kernel layout `[kt,kh,kw,Ci,Co]`.
pub struct Conv3d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: (usize, usize, usize),
}

impl Conv3d {
    pub fn new(
        k: (usize, usize, usize),
        ci: usize,
        co: usize,
        stride: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Conv3d {
        let fan_in = (k.0 * k.1 * k.2 * ci) as f64;
        Conv3d {
            kernel: normal_param(vec![k.0, k.1, k.2, ci, co], (1.0 / fan_in).sqrt(), rng),
            bias: zeros_param(vec![co]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv3d_same(&self.kernel, Some(&self.bias), self.stride)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.kernel, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

/// Transposed same-padded 3-D convolution. Kernel layout `[Ci,kt,kh,kw,Co]`.
pub struct ConvT3d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: (usize, usize, usize),
}

impl ConvT3d {
    pub fn new(
        k: (usize, usize, usize),
        ci: usize,
        co: usize,
        stride: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> ConvT3d {
        let fan_in = (k.0 * k.1 * k.2 * ci) as f64 / (stride.0 * stride.1 * stride.2) as f64;
        ConvT3d {
            kernel: normal_param(
                vec![ci, k.0, k.1, k.2, co],
                (1.0 / fan_in.max(1.0)).sqrt(),
                rng,
            ),
            bias: zeros_param(vec![co]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv3d_transpose_same(&self.kernel, Some(&self.bias), self.stride)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.kernel, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

/// Learned additive position embedding over a (T,H,W) grid: one table per
/// axis, summed into the input.
pub struct PosEmb3d {
    pub t_table: Tensor,
    pub h_table: Tensor,
    pub w_table: Tensor,
}

impl PosEmb3d {
    pub fn new(grid: (usize, usize, usize), width: usize, rng: &mut ChaCha8Rng) -> PosEmb3d {
        PosEmb3d {
            t_table: normal_param(vec![grid.0, width], 0.02, rng),
            h_table: normal_param(vec![grid.1, width], 0.02, rng),
            w_table: normal_param(vec![grid.2, width], 0.02, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.add_pos3(&self.t_table, &self.h_table, &self.w_table)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.t_table, &self.h_table, &self.w_table]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.t_table, &mut self.h_table, &mut self.w_table]
    }
}
