//! Procedural sprite video with piecewise-constant dynamics.
//!
//! Sprites are filled squares moving at constant velocity and bouncing off
//! the frame edges, so each 16-frame window is predictable from its
//! predecessor. Everything is a pure function of (spec, frame index).

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::vqvae::{VideoClip, CLIP_LEN};

const KIND_FRAMES: &[u8; 4] = b"FRM1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub n_sprites: usize,
    pub sprite_size: usize,
    /// Maximum per-axis speed in pixels per frame; 0 freezes the scene.
    pub speed: f64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        SynthSceneSpec {
            seed: 0,
            width: 32,
            height: 32,
            fps: 30.0,
            n_sprites: 3,
            sprite_size: 7,
            speed: 1.25,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.width.is_multiple_of(4) || !self.height.is_multiple_of(4) {
            return Err(Error::InvalidConfig(
                "frame size must be divisible by 4".into(),
            ));
        }
        if self.fps <= 0.0 {
            return Err(Error::InvalidConfig("fps must be positive".into()));
        }
        if self.sprite_size == 0 || self.sprite_size >= self.width.min(self.height) {
            return Err(Error::InvalidConfig("sprite size out of range".into()));
        }
        Ok(())
    }
}

const PALETTE: [[f64; 3]; 5] = [
    [0.95, 0.25, 0.20],
    [0.20, 0.80, 0.35],
    [0.25, 0.40, 0.95],
    [0.95, 0.85, 0.25],
    [0.80, 0.30, 0.85],
];

/// A rendered-on-demand stream: sprite trajectories are precomputed, frames
/// rasterize lazily.
pub struct FrameStream {
    pub spec: SynthSceneSpec,
    pub n_frames: usize,
    /// Per sprite: (x, y) per frame.
    traces: Vec<Vec<(f64, f64)>>,
    colors: Vec<[f64; 3]>,
}

/// Deterministic timestamped frame stream.
pub fn gen_video(spec: &SynthSceneSpec, n_frames: usize) -> Result<FrameStream> {
    spec.validate()?;
    if n_frames < CLIP_LEN {
        return Err(Error::InvalidConfig(format!(
            "need at least {CLIP_LEN} frames, got {n_frames}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.sprite_size as f64;
    let (max_x, max_y) = (
        spec.width as f64 - size,
        spec.height as f64 - size,
    );
    let mut traces = Vec::with_capacity(spec.n_sprites);
    let mut colors = Vec::with_capacity(spec.n_sprites);
    for s in 0..spec.n_sprites {
        let mut x = rng.gen_range(0.0..=max_x.max(0.0));
        let mut y = rng.gen_range(0.0..=max_y.max(0.0));
        let mut vx = if spec.speed > 0.0 {
            rng.gen_range(-spec.speed..=spec.speed)
        } else {
            0.0
        };
        let mut vy = if spec.speed > 0.0 {
            rng.gen_range(-spec.speed..=spec.speed)
        } else {
            0.0
        };
        let mut trace = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            trace.push((x, y));
            x += vx;
            y += vy;
            if x < 0.0 {
                x = -x;
                vx = -vx;
            }
            if x > max_x {
                x = 2.0 * max_x - x;
                vx = -vx;
            }
            if y < 0.0 {
                y = -y;
                vy = -vy;
            }
            if y > max_y {
                y = 2.0 * max_y - y;
                vy = -vy;
            }
        }
        traces.push(trace);
        colors.push(PALETTE[s % PALETTE.len()]);
    }
    Ok(FrameStream {
        spec: spec.clone(),
        n_frames,
        traces,
        colors,
    })
}

impl FrameStream {
    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 / self.spec.fps
    }

    /// Rasterize one frame as `[H, W, 3]` values in [0, 1].
    pub fn frame(&self, i: usize) -> Vec<f64> {
        assert!(i < self.n_frames, "frame index out of range");
        let (w, h) = (self.spec.width, self.spec.height);
        let mut out = vec![0.08; h * w * 3];
        let size = self.spec.sprite_size;
        for (trace, color) in self.traces.iter().zip(&self.colors) {
            let (x, y) = trace[i];
            let x0 = x.round() as isize;
            let y0 = y.round() as isize;
            for dy in 0..size as isize {
                let py = y0 + dy;
                if py < 0 || py >= h as isize {
                    continue;
                }
                for dx in 0..size as isize {
                    let px = x0 + dx;
                    if px < 0 || px >= w as isize {
                        continue;
                    }
                    let base = (py as usize * w + px as usize) * 3;
                    out[base..base + 3].copy_from_slice(color);
                }
            }
        }
        out
    }

    pub fn n_windows(&self) -> usize {
        self.n_frames / CLIP_LEN
    }

    /// The `k`-th consecutive non-overlapping 16-frame window.
    pub fn clip(&self, window: usize) -> Result<VideoClip> {
        if window >= self.n_windows() {
            return Err(Error::InvalidConfig(format!(
                "window {window} out of range ({} windows)",
                self.n_windows()
            )));
        }
        let (w, h) = (self.spec.width, self.spec.height);
        let mut data = Vec::with_capacity(CLIP_LEN * h * w * 3);
        let mut timestamps = Vec::with_capacity(CLIP_LEN);
        for f in window * CLIP_LEN..(window + 1) * CLIP_LEN {
            data.extend_from_slice(&self.frame(f));
            timestamps.push(self.timestamp(f));
        }
        VideoClip::new(Tensor::from_vec(vec![CLIP_LEN, h, w, 3], data), timestamps)
    }

    /// Materialize to the versioned frame-stream container.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = ContainerWriter::new(KIND_FRAMES);
        w.add_json(
            "meta",
            &serde_json::json!({
                "spec": self.spec,
                "n_frames": self.n_frames,
            }),
        )?;
        let timestamps: Vec<f64> = (0..self.n_frames).map(|i| self.timestamp(i)).collect();
        w.add_f64s("timestamps", &timestamps);
        let mut frames = Vec::with_capacity(self.n_frames * self.spec.height * self.spec.width * 3);
        for i in 0..self.n_frames {
            frames.extend_from_slice(&self.frame(i));
        }
        w.add_f64s("frames", &frames);
        w.write_to(path)
    }
}

/// Frames read back from a stream container.
pub struct StoredFrames {
    pub spec: SynthSceneSpec,
    pub n_frames: usize,
    pub timestamps: Vec<f64>,
    /// `n_frames * H * W * 3`, row-major.
    pub frames: Vec<f64>,
}

impl StoredFrames {
    pub fn read_from(path: &Path) -> Result<StoredFrames> {
        let c = Container::read_from(path)?;
        if &c.kind != KIND_FRAMES {
            return Err(Error::Format("not a frame stream container".into()));
        }
        let meta: serde_json::Value = c.json("meta")?;
        let spec: SynthSceneSpec = serde_json::from_value(meta["spec"].clone())?;
        let n_frames = meta["n_frames"]
            .as_u64()
            .ok_or_else(|| Error::Format("missing n_frames".into()))? as usize;
        let timestamps = c.f64s("timestamps")?;
        let frames = c.f64s("frames")?;
        if timestamps.len() != n_frames
            || frames.len() != n_frames * spec.height * spec.width * 3
        {
            return Err(Error::Format("frame payload shape mismatch".into()));
        }
        Ok(StoredFrames {
            spec,
            n_frames,
            timestamps,
            frames,
        })
    }
}
