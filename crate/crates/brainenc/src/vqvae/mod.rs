//! Stage-1 model: strided 3-D conv encoder/decoder with attention residual
//! blocks, nearest-neighbor vector quantization, EMA codebook maintenance,
//! and the reconstruction + commitment training loss.

mod codebook;
mod model;

pub use codebook::{CodebookState, Quantized};
pub use model::{vqvae_loss, LossTerms, VqvaeModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Tensor;

/// Fixed window length consumed by the model.
pub const CLIP_LEN: usize = 16;

/// A 16-frame window of `[0,1]` frames with per-frame timestamps.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Tensor,
    pub timestamps: Vec<f64>,
}

impl VideoClip {
    pub fn new(frames: Tensor, timestamps: Vec<f64>) -> Result<VideoClip> {
        let s = frames.shape();
        if s.len() != 4 || s[0] != CLIP_LEN {
            return Err(Error::ShapeMismatch(format!(
                "clip frames must be [{CLIP_LEN},H,W,C], got {s:?}"
            )));
        }
        if timestamps.len() != CLIP_LEN {
            return Err(Error::ShapeMismatch(format!(
                "need {CLIP_LEN} timestamps, got {}",
                timestamps.len()
            )));
        }
        if frames.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidConfig(
                "clip frame values must lie in [0,1]".into(),
            ));
        }
        Ok(VideoClip { frames, timestamps })
    }

    /// Mid-clip timestamp, the anchor for TR alignment.
    pub fn center_time(&self) -> f64 {
        (self.timestamps[0] + self.timestamps[CLIP_LEN - 1]) / 2.0
    }
}

/// Stack clips into a `[B,16,H,W,C]` batch tensor.
pub fn stack_clips(clips: &[&VideoClip]) -> Result<Tensor> {
    if clips.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let shape = clips[0].frames.shape().to_vec();
    let mut data = Vec::with_capacity(clips.len() * clips[0].frames.len());
    for c in clips {
        if c.frames.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch("clip shapes differ in batch".into()));
        }
        data.extend_from_slice(c.frames.data());
    }
    let mut out_shape = vec![clips.len()];
    out_shape.extend(shape);
    Ok(Tensor::input(out_shape, data))
}

/// Discrete latent indices on the (T',H',W') grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    pub shape: (usize, usize, usize),
    pub idx: Vec<u32>,
}

impl CodeGrid {
    pub fn cells(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VqvaeConfig {
    pub embedding_dim: usize,
    pub n_codes: usize,
    pub n_hiddens: usize,
    pub n_res_layers: usize,
    pub downsample: (usize, usize, usize),
    /// Commitment weight.
    pub beta: f64,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub heads: usize,
}

impl VqvaeConfig {
    /// Desk-scale default: small enough to train on a laptop CPU.
    pub fn desk() -> VqvaeConfig {
        VqvaeConfig {
            embedding_dim: 64,
            n_codes: 256,
            n_hiddens: 60,
            n_res_layers: 2,
            downsample: (4, 4, 4),
            beta: 0.25,
            frame_height: 32,
            frame_width: 32,
            channels: 3,
            heads: 2,
        }
    }

    /// Full-size hyperparameter preset.
    pub fn full_scale() -> VqvaeConfig {
        VqvaeConfig {
            embedding_dim: 256,
            n_codes: 2048,
            n_hiddens: 240,
            n_res_layers: 4,
            downsample: (4, 4, 4),
            beta: 0.25,
            frame_height: 32,
            frame_width: 32,
            channels: 3,
            heads: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v > 0 && v.is_power_of_two();
        if !(pow2(self.downsample.0) && pow2(self.downsample.1) && pow2(self.downsample.2)) {
            return Err(Error::InvalidConfig(
                "downsample factors must be powers of two".into(),
            ));
        }
        if self.beta <= 0.0 {
            return Err(Error::InvalidConfig("beta must be positive".into()));
        }
        if !CLIP_LEN.is_multiple_of(self.downsample.0)
            || !self.frame_height.is_multiple_of(self.downsample.1)
            || !self.frame_width.is_multiple_of(self.downsample.2)
        {
            return Err(Error::InvalidConfig(format!(
                "downsample {:?} must divide clip shape ({CLIP_LEN},{},{})",
                self.downsample, self.frame_height, self.frame_width
            )));
        }
        if !self.n_hiddens.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(
                "n_hiddens must be divisible by heads".into(),
            ));
        }
        if self.n_codes == 0 || self.n_codes > u32::MAX as usize {
            return Err(Error::InvalidConfig("n_codes out of range".into()));
        }
        Ok(())
    }

    /// Latent grid (T',H',W') for a 16-frame clip.
    pub fn latent_grid(&self) -> (usize, usize, usize) {
        (
            CLIP_LEN / self.downsample.0,
            self.frame_height / self.downsample.1,
            self.frame_width / self.downsample.2,
        )
    }
}
