//! Encoder/decoder with attention residual blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nncore::{AxialBlock, Conv3d, ConvT3d, LayerNorm, PosEmb3d, Tensor};
use crate::vqvae::{CodebookState, CodeGrid, VqvaeConfig, CLIP_LEN};

/// Conv -> LayerNorm -> position embedding -> summed axial attention,
/// joined back through a residual connection.
struct ResBlockAttn {
    conv: Conv3d,
    ln: LayerNorm,
    axial: AxialBlock,
}

impl ResBlockAttn {
    fn new(width: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<ResBlockAttn> {
        Ok(ResBlockAttn {
            conv: Conv3d::new((3, 3, 3), width, width, (1, 1, 1), rng),
            ln: LayerNorm::new(width),
            axial: AxialBlock::new(width, heads, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, pos: &PosEmb3d) -> Tensor {
        let h = self.conv.forward(x);
        let h = self.ln.forward(&h);
        let h = pos.forward(&h);
        let h = self.axial.forward(&h, false, None);
        x.add(&h)
    }
}

/// Per-stage strides that realize a power-of-two downsample triple.
fn stages(ds: (usize, usize, usize)) -> Vec<(usize, usize, usize)> {
    let log2 = |v: usize| v.trailing_zeros() as usize;
    let n = log2(ds.0).max(log2(ds.1)).max(log2(ds.2));
    (0..n)
        .map(|i| {
            (
                if i < log2(ds.0) { 2 } else { 1 },
                if i < log2(ds.1) { 2 } else { 1 },
                if i < log2(ds.2) { 2 } else { 1 },
            )
        })
        .collect()
}

fn stage_kernel(stride: (usize, usize, usize)) -> (usize, usize, usize) {
    (
        if stride.0 == 2 { 4 } else { 3 },
        if stride.1 == 2 { 4 } else { 3 },
        if stride.2 == 2 { 4 } else { 3 },
    )
}

struct Encoder {
    stems: Vec<Conv3d>,
    blocks: Vec<ResBlockAttn>,
    pre_vq: Conv3d,
}

struct Decoder {
    post_vq: Conv3d,
    blocks: Vec<ResBlockAttn>,
    ups: Vec<ConvT3d>,
}

pub struct VqvaeModel {
    pub config: VqvaeConfig,
    pub codebook: CodebookState,
    pos: PosEmb3d,
    encoder: Encoder,
    decoder: Decoder,
}

impl VqvaeModel {
    pub fn new(config: VqvaeConfig, seed: u64) -> Result<VqvaeModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hid = config.n_hiddens;
        let plan = stages(config.downsample);

        let mut stems = Vec::new();
        let mut ci = config.channels;
        for &stride in &plan {
            stems.push(Conv3d::new(stage_kernel(stride), ci, hid, stride, &mut rng));
            ci = hid;
        }
        let enc_blocks = (0..config.n_res_layers)
            .map(|_| ResBlockAttn::new(hid, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let pre_vq = Conv3d::new((1, 1, 1), hid, config.embedding_dim, (1, 1, 1), &mut rng);

        let post_vq = Conv3d::new((1, 1, 1), config.embedding_dim, hid, (1, 1, 1), &mut rng);
        let dec_blocks = (0..config.n_res_layers)
            .map(|_| ResBlockAttn::new(hid, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        for (i, &stride) in plan.iter().rev().enumerate() {
            let co = if i + 1 == plan.len() {
                config.channels
            } else {
                hid
            };
            ups.push(ConvT3d::new(stage_kernel(stride), hid, co, stride, &mut rng));
        }

        let pos = PosEmb3d::new(config.latent_grid(), hid, &mut rng);
        let codebook = CodebookState::init(config.n_codes, config.embedding_dim, &mut rng);
        Ok(VqvaeModel {
            config,
            codebook,
            pos,
            encoder: Encoder {
                stems,
                blocks: enc_blocks,
                pre_vq,
            },
            decoder: Decoder {
                post_vq,
                blocks: dec_blocks,
                ups,
            },
        })
    }

    fn check_clip_shape(&self, clips: &Tensor) -> Result<()> {
        let s = clips.shape();
        let want = [
            CLIP_LEN,
            self.config.frame_height,
            self.config.frame_width,
            self.config.channels,
        ];
        if s.len() != 5 || s[1..] != want {
            return Err(Error::ShapeMismatch(format!(
                "expected clips [B,{},{},{},{}], got {s:?}",
                want[0], want[1], want[2], want[3]
            )));
        }
        Ok(())
    }

    /// Encode a clip batch. Returns the hidden feature grid (used as the
    /// conditioning context for the prior) and the pre-quantization latents.
    pub fn encode(&self, clips: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_clip_shape(clips)?;
        let mut x = clips.clone();
        for stem in &self.encoder.stems {
            x = stem.forward(&x).gelu();
        }
        for block in &self.encoder.blocks {
            x = block.forward(&x, &self.pos);
        }
        let z_e = self.encoder.pre_vq.forward(&x);
        Ok((x, z_e))
    }

    /// Decode latents (straight-through or looked-up embeddings) back to a
    /// clip batch.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let grid = self.config.latent_grid();
        let s = z.shape();
        if s.len() != 5
            || s[1] != grid.0
            || s[2] != grid.1
            || s[3] != grid.2
            || s[4] != self.config.embedding_dim
        {
            return Err(Error::ShapeMismatch(format!(
                "expected latents [B,{},{},{},{}], got {s:?}",
                grid.0, grid.1, grid.2, self.config.embedding_dim
            )));
        }
        let mut x = self.decoder.post_vq.forward(z);
        for block in &self.decoder.blocks {
            x = block.forward(&x, &self.pos);
        }
        let last = self.decoder.ups.len() - 1;
        for (i, up) in self.decoder.ups.iter().enumerate() {
            x = up.forward(&x);
            if i != last {
                x = x.gelu();
            }
        }
        Ok(x)
    }

    /// Decode discrete code grids through the codebook lookup.
    pub fn decode_codes(&self, codes: &[CodeGrid]) -> Result<Tensor> {
        if codes.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let grid = self.config.latent_grid();
        let d = self.config.embedding_dim;
        let cells = grid.0 * grid.1 * grid.2;
        let mut data = Vec::with_capacity(codes.len() * cells * d);
        for cg in codes {
            if cg.shape != grid {
                return Err(Error::ShapeMismatch(format!(
                    "code grid {:?} does not match config grid {grid:?}",
                    cg.shape
                )));
            }
            for &k in &cg.idx {
                let k = k as usize;
                data.extend_from_slice(&self.codebook.embeddings[k * d..(k + 1) * d]);
            }
        }
        let z = Tensor::from_vec(vec![codes.len(), grid.0, grid.1, grid.2, d], data);
        self.decode(&z)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("pos.t_table".into(), &self.pos.t_table);
        f("pos.h_table".into(), &self.pos.h_table);
        f("pos.w_table".into(), &self.pos.w_table);
        for (i, s) in self.encoder.stems.iter().enumerate() {
            f(format!("encoder.stem{i}.kernel"), &s.kernel);
            f(format!("encoder.stem{i}.bias"), &s.bias);
        }
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            visit_block(&format!("encoder.block{i}"), b, f);
        }
        f("encoder.pre_vq.kernel".into(), &self.encoder.pre_vq.kernel);
        f("encoder.pre_vq.bias".into(), &self.encoder.pre_vq.bias);
        f("decoder.post_vq.kernel".into(), &self.decoder.post_vq.kernel);
        f("decoder.post_vq.bias".into(), &self.decoder.post_vq.bias);
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            visit_block(&format!("decoder.block{i}"), b, f);
        }
        for (i, u) in self.decoder.ups.iter().enumerate() {
            f(format!("decoder.up{i}.kernel"), &u.kernel);
            f(format!("decoder.up{i}.bias"), &u.bias);
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.pos.t_table);
        out.push(&mut self.pos.h_table);
        out.push(&mut self.pos.w_table);
        for s in &mut self.encoder.stems {
            out.push(&mut s.kernel);
            out.push(&mut s.bias);
        }
        for b in &mut self.encoder.blocks {
            visit_block_mut(b, &mut out);
        }
        out.push(&mut self.encoder.pre_vq.kernel);
        out.push(&mut self.encoder.pre_vq.bias);
        out.push(&mut self.decoder.post_vq.kernel);
        out.push(&mut self.decoder.post_vq.bias);
        for b in &mut self.decoder.blocks {
            visit_block_mut(b, &mut out);
        }
        for u in &mut self.decoder.ups {
            out.push(&mut u.kernel);
            out.push(&mut u.bias);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Restore parameters from a name -> tensor map (checkpoint load).
    pub fn set_named_params(
        &mut self,
        map: &std::collections::HashMap<String, Tensor>,
    ) -> Result<()> {
        let names: Vec<String> = self.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, slot) in names.into_iter().zip(self.params_mut()) {
            let t = map
                .get(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter '{name}' shape {:?} != expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Tensor::param(t.shape().to_vec(), t.data().to_vec());
        }
        Ok(())
    }
}

fn visit_block<'a>(
    prefix: &str,
    b: &'a ResBlockAttn,
    f: &mut dyn FnMut(String, &'a Tensor),
) {
    f(format!("{prefix}.conv.kernel"), &b.conv.kernel);
    f(format!("{prefix}.conv.bias"), &b.conv.bias);
    f(format!("{prefix}.ln.gain"), &b.ln.gain);
    f(format!("{prefix}.ln.bias"), &b.ln.bias);
    for (axis, attn) in [
        ("t", &b.axial.temporal),
        ("h", &b.axial.height),
        ("w", &b.axial.width),
    ] {
        f(format!("{prefix}.axial.{axis}.w_qs"), &attn.w_qs);
        f(format!("{prefix}.axial.{axis}.w_ks"), &attn.w_ks);
        f(format!("{prefix}.axial.{axis}.w_vs"), &attn.w_vs);
        f(format!("{prefix}.axial.{axis}.fc"), &attn.fc);
    }
}

fn visit_block_mut<'a>(b: &'a mut ResBlockAttn, out: &mut Vec<&'a mut Tensor>) {
    out.push(&mut b.conv.kernel);
    out.push(&mut b.conv.bias);
    out.push(&mut b.ln.gain);
    out.push(&mut b.ln.bias);
    for attn in [
        &mut b.axial.temporal,
        &mut b.axial.height,
        &mut b.axial.width,
    ] {
        out.push(&mut attn.w_qs);
        out.push(&mut attn.w_ks);
        out.push(&mut attn.w_vs);
        out.push(&mut attn.fc);
    }
}

/// Loss terms of one training forward.
pub struct LossTerms {
    pub total: Tensor,
    pub recon: Tensor,
    pub commit: Tensor,
    /// Codebook fit term, reported as a metric only; the codebook is
    /// EMA-updated and carries no gradient.
    pub codebook_metric: f64,
}

/// Mean-reduced reconstruction + commitment loss.
pub fn vqvae_loss(
    x: &Tensor,
    x_hat: &Tensor,
    z_e: &Tensor,
    z_q: &Tensor,
    beta: f64,
) -> Result<LossTerms> {
    if beta <= 0.0 {
        return Err(Error::InvalidConfig("beta must be positive".into()));
    }
    if x.shape() != x_hat.shape() || z_e.shape() != z_q.shape() {
        return Err(Error::ShapeMismatch("loss inputs disagree".into()));
    }
    let d = x_hat.sub(x);
    let recon = d.mul(&d).mean_all();
    let cd = z_q.stop_gradient().sub(z_e);
    let commit = cd.mul(&cd).mean_all().scale(beta);
    let total = recon.add(&commit);
    let codebook_metric = z_e
        .data()
        .iter()
        .zip(z_q.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / z_e.len() as f64;
    Ok(LossTerms {
        total,
        recon,
        commit,
        codebook_metric,
    })
}
