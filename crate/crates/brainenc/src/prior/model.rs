//! The causal transformer stack with named activation taps.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nncore::{
    make_dropout_mask, normal_param, AxialBlock, LayerNorm, Linear, MultiHeadAttention,
    PosEmb3d, Tensor,
};
use crate::prior::PriorConfig;
use crate::vqvae::{CodeGrid, VqvaeModel};

/// Tap sites registered for every block, mirroring the layer naming scheme
/// `attn_stack.attn_nets.{k}.{site}`.
pub const TAP_SITES: [&str; 10] = [
    "pre_attn_norm",
    "post_attn_dp",
    "pre_enc_norm",
    "post_enc_dp",
    "pre_fc_norm",
    "fc_block.0",
    "fc_block.1",
    "fc_block.2",
    "fc_block",
    "post_fc_dp",
];

pub enum ForwardMode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

struct PriorBlock {
    pre_attn_norm: LayerNorm,
    attn: AxialBlock,
    pre_enc_norm: LayerNorm,
    enc_attn: MultiHeadAttention,
    pre_fc_norm: LayerNorm,
    fc0: Linear,
    fc2: Linear,
}

impl PriorBlock {
    fn new(
        hidden: usize,
        cond_width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PriorBlock> {
        Ok(PriorBlock {
            pre_attn_norm: LayerNorm::new(hidden),
            attn: AxialBlock::new(hidden, heads, rng)?,
            pre_enc_norm: LayerNorm::new(hidden),
            // Queries/keys in model width, values in the conditioning width,
            // projected back to model width by the attention fc.
            enc_attn: MultiHeadAttention::new(
                hidden, cond_width, hidden, cond_width, hidden, heads, rng,
            )?,
            pre_fc_norm: LayerNorm::new(hidden),
            fc0: Linear::new(hidden, 4 * hidden, true, rng),
            fc2: Linear::new(4 * hidden, hidden, true, rng),
        })
    }
}

/// Autoregressive prior over code grids. Holds a frozen stage-1 reference
/// for code embeddings and conditioning features; only its own parameters
/// train.
pub struct PriorModel {
    pub config: PriorConfig,
    pub vqvae: Arc<VqvaeModel>,
    pub grid: (usize, usize, usize),
    pub n_codes: usize,
    cond_width: usize,
    fc_in: Linear,
    sos: Tensor,
    null_ctx: Tensor,
    pos: PosEmb3d,
    blocks: Vec<PriorBlock>,
    ln_f: LayerNorm,
    fc_out: Linear,
}

impl PriorModel {
    pub fn new(config: PriorConfig, vqvae: Arc<VqvaeModel>, seed: u64) -> Result<PriorModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = config.hidden_dim;
        let cond_width = vqvae.config.n_hiddens;
        let grid = vqvae.config.latent_grid();
        let n_codes = vqvae.config.n_codes;
        let blocks = (0..config.layers)
            .map(|_| PriorBlock::new(hidden, cond_width, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(PriorModel {
            fc_in: Linear::new(vqvae.config.embedding_dim, hidden, true, &mut rng),
            sos: normal_param(vec![hidden], 0.02, &mut rng),
            null_ctx: normal_param(vec![cond_width], 0.02, &mut rng),
            pos: PosEmb3d::new(grid, hidden, &mut rng),
            blocks,
            ln_f: LayerNorm::new(hidden),
            fc_out: Linear::new(hidden, n_codes, true, &mut rng),
            config,
            vqvae,
            grid,
            n_codes,
            cond_width,
        })
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    pub fn cond_width(&self) -> usize {
        self.cond_width
    }

    /// Conditioning tensor for a batch: per item either the previous
    /// window's encoder features `[S, cond_width]` or the learned null
    /// context.
    pub fn build_context(&self, entries: &[Option<&[f64]>]) -> Result<Tensor> {
        if entries.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let s = self.cells();
        let d = self.cond_width;
        let mut data = vec![0.0; entries.len() * s * d];
        let mut flags = vec![false; entries.len()];
        for (bi, e) in entries.iter().enumerate() {
            match e {
                Some(feat) => {
                    if feat.len() != s * d {
                        return Err(Error::ShapeMismatch(format!(
                            "context features must have {} values, got {}",
                            s * d,
                            feat.len()
                        )));
                    }
                    data[bi * s * d..(bi + 1) * s * d].copy_from_slice(feat);
                }
                None => flags[bi] = true,
            }
        }
        let base = Tensor::input(vec![entries.len(), s, d], data);
        Ok(base.override_flagged_batches(Arc::new(flags), &self.null_ctx))
    }

    pub fn null_context(&self, batch: usize) -> Tensor {
        self.build_context(&vec![None; batch]).expect("batch > 0")
    }

    /// Shifted code embeddings through the frozen codebook: cell `i` holds
    /// the embedding of code `i-1`; cell 0 is zeros, later replaced by the
    /// learned start vector.
    fn build_inputs(&self, codes: &[CodeGrid]) -> Result<Tensor> {
        if codes.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let s = self.cells();
        let d = self.vqvae.config.embedding_dim;
        let book = &self.vqvae.codebook;
        let mut data = vec![0.0; codes.len() * s * d];
        for (bi, cg) in codes.iter().enumerate() {
            if cg.shape != self.grid {
                return Err(Error::ShapeMismatch(format!(
                    "code grid {:?} does not match prior grid {:?}",
                    cg.shape, self.grid
                )));
            }
            for (i, &code) in cg.idx.iter().enumerate() {
                if code as usize >= self.n_codes {
                    return Err(Error::InvalidConfig(format!(
                        "code index {code} out of range for {} codes",
                        self.n_codes
                    )));
                }
                if i + 1 < s {
                    let dst = (bi * s + i + 1) * d;
                    let src = code as usize * d;
                    data[dst..dst + d].copy_from_slice(&book.embeddings[src..src + d]);
                }
            }
        }
        Ok(Tensor::input(vec![codes.len(), s, d], data))
    }

    /// Per-position next-code logits `[B, T', H', W', n_codes]`. Logits at
    /// raster position i depend only on codes at positions < i.
    pub fn forward_logits(
        &self,
        codes: &[CodeGrid],
        ctx: &Tensor,
        mut mode: ForwardMode<'_>,
        mut taps: Option<&mut Vec<(String, Tensor)>>,
    ) -> Result<Tensor> {
        let b = codes.len();
        let (t, h, w) = self.grid;
        let s = self.cells();
        let hidden = self.config.hidden_dim;
        if ctx.shape().len() != 3 || ctx.shape()[0] != b || ctx.shape()[2] != self.cond_width {
            return Err(Error::ShapeMismatch(format!(
                "context must be [B,Sc,{}], got {:?}",
                self.cond_width,
                ctx.shape()
            )));
        }

        let emb = self.build_inputs(codes)?;
        let x = self.fc_in.forward(&emb).replace_first_cell(&self.sos);
        let mut x = self.pos.forward(&x.reshape(vec![b, t, h, w, hidden]));

        for (k, block) in self.blocks.iter().enumerate() {
            let mut record = |site: &str, tensor: &Tensor| {
                if let Some(sink) = taps.as_mut() {
                    sink.push((format!("attn_stack.attn_nets.{k}.{site}"), tensor.clone()));
                }
            };

            let pre = block.pre_attn_norm.forward(&x);
            record("pre_attn_norm", &pre);
            let attn_drop = match &mut mode {
                ForwardMode::Train(rng) => Some((self.config.attn_dropout, &mut **rng)),
                ForwardMode::Eval => None,
            };
            let a = block.attn.forward(&pre, true, attn_drop);
            let a = self.dropout(&a, &mut mode);
            record("post_attn_dp", &a);
            x = x.add(&a);

            let pre = block.pre_enc_norm.forward(&x);
            record("pre_enc_norm", &pre);
            let seq = pre.reshape(vec![b, s, hidden]);
            let e = {
                let opts = crate::nncore::AttnOpts {
                    mask: None,
                    dropout: match &mut mode {
                        ForwardMode::Train(rng) => {
                            Some((self.config.attn_dropout, &mut **rng))
                        }
                        ForwardMode::Eval => None,
                    },
                };
                block.enc_attn.forward(&seq, ctx, opts)
            };
            let e = self.dropout(&e, &mut mode).reshape(vec![b, t, h, w, hidden]);
            record("post_enc_dp", &e);
            x = x.add(&e);

            let pre = block.pre_fc_norm.forward(&x);
            record("pre_fc_norm", &pre);
            let f0 = block.fc0.forward(&pre);
            record("fc_block.0", &f0);
            let f1 = f0.gelu();
            record("fc_block.1", &f1);
            let f2 = block.fc2.forward(&f1);
            record("fc_block.2", &f2);
            record("fc_block", &f2);
            let f = self.dropout(&f2, &mut mode);
            record("post_fc_dp", &f);
            x = x.add(&f);
        }

        let x = self.ln_f.forward(&x);
        Ok(self.fc_out.forward(&x))
    }

    fn dropout(&self, x: &Tensor, mode: &mut ForwardMode<'_>) -> Tensor {
        match mode {
            ForwardMode::Train(rng) if self.config.dropout > 0.0 => {
                x.dropout_mask(make_dropout_mask(x.len(), self.config.dropout, rng))
            }
            _ => x.clone(),
        }
    }

    /// Mean next-code cross-entropy over all grid positions.
    pub fn cross_entropy(&self, logits: &Tensor, targets: &[CodeGrid]) -> Result<Tensor> {
        let s = self.cells();
        let b = targets.len();
        if logits.shape()
            != [b, self.grid.0, self.grid.1, self.grid.2, self.n_codes].as_slice()
        {
            return Err(Error::ShapeMismatch(format!(
                "logit grid shape {:?} unexpected",
                logits.shape()
            )));
        }
        let mut flat = Vec::with_capacity(b * s);
        for cg in targets {
            if cg.shape != self.grid {
                return Err(Error::ShapeMismatch("target grid mismatch".into()));
            }
            flat.extend(cg.idx.iter().map(|&c| c as usize));
        }
        logits
            .reshape(vec![b * s, self.n_codes])
            .cross_entropy_mean(&Arc::new(flat))
    }

    /// Training loss for one batch of (codes, context) pairs.
    pub fn loss_on_batch(
        &self,
        codes: &[CodeGrid],
        ctx: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let logits = self.forward_logits(codes, ctx, ForwardMode::Train(rng), None)?;
        self.cross_entropy(&logits, codes)
    }

    /// All registered tap names with their activation shapes (batch 1).
    pub fn layer_registry(&self) -> Vec<(String, Vec<usize>)> {
        let (t, h, w) = self.grid;
        let hid = self.config.hidden_dim;
        let mut out = Vec::new();
        for k in 0..self.config.layers {
            for site in TAP_SITES {
                let width = match site {
                    "fc_block.0" | "fc_block.1" => 4 * hid,
                    _ => hid,
                };
                out.push((
                    format!("attn_stack.attn_nets.{k}.{site}"),
                    vec![1, t, h, w, width],
                ));
            }
        }
        out
    }

    /// Textual registry dump, one `name shape` line per tap.
    pub fn registry_dump(&self) -> String {
        self.layer_registry()
            .into_iter()
            .map(|(name, shape)| format!("{name} {shape:?}\n"))
            .collect()
    }

    /// Capture one named activation in inference mode (dropout = identity).
    pub fn tap_activation(
        &self,
        name: &str,
        codes: &[CodeGrid],
        ctx: &Tensor,
    ) -> Result<Tensor> {
        if !self.layer_registry().iter().any(|(n, _)| n == name) {
            return Err(Error::UnknownTap(name.to_string()));
        }
        let mut sink = Vec::new();
        self.forward_logits(codes, ctx, ForwardMode::Eval, Some(&mut sink))?;
        sink.into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownTap(name.to_string()))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("fc_in.w".into(), &self.fc_in.w);
        f("fc_in.b".into(), self.fc_in.b.as_ref().expect("fc_in has bias"));
        f("sos".into(), &self.sos);
        f("null_ctx".into(), &self.null_ctx);
        f("pos.t_table".into(), &self.pos.t_table);
        f("pos.h_table".into(), &self.pos.h_table);
        f("pos.w_table".into(), &self.pos.w_table);
        for (k, b) in self.blocks.iter().enumerate() {
            let p = format!("attn_stack.attn_nets.{k}");
            f(format!("{p}.pre_attn_norm.gain"), &b.pre_attn_norm.gain);
            f(format!("{p}.pre_attn_norm.bias"), &b.pre_attn_norm.bias);
            for (axis, attn) in [
                ("t", &b.attn.temporal),
                ("h", &b.attn.height),
                ("w", &b.attn.width),
            ] {
                f(format!("{p}.attn.{axis}.w_qs"), &attn.w_qs);
                f(format!("{p}.attn.{axis}.w_ks"), &attn.w_ks);
                f(format!("{p}.attn.{axis}.w_vs"), &attn.w_vs);
                f(format!("{p}.attn.{axis}.fc"), &attn.fc);
            }
            f(format!("{p}.pre_enc_norm.gain"), &b.pre_enc_norm.gain);
            f(format!("{p}.pre_enc_norm.bias"), &b.pre_enc_norm.bias);
            f(format!("{p}.enc_attn.w_qs"), &b.enc_attn.w_qs);
            f(format!("{p}.enc_attn.w_ks"), &b.enc_attn.w_ks);
            f(format!("{p}.enc_attn.w_vs"), &b.enc_attn.w_vs);
            f(format!("{p}.enc_attn.fc"), &b.enc_attn.fc);
            f(format!("{p}.pre_fc_norm.gain"), &b.pre_fc_norm.gain);
            f(format!("{p}.pre_fc_norm.bias"), &b.pre_fc_norm.bias);
            f(format!("{p}.fc_block.0.w"), &b.fc0.w);
            f(format!("{p}.fc_block.0.b"), b.fc0.b.as_ref().expect("bias"));
            f(format!("{p}.fc_block.2.w"), &b.fc2.w);
            f(format!("{p}.fc_block.2.b"), b.fc2.b.as_ref().expect("bias"));
        }
        f("ln_f.gain".into(), &self.ln_f.gain);
        f("ln_f.bias".into(), &self.ln_f.bias);
        f("fc_out.w".into(), &self.fc_out.w);
        f("fc_out.b".into(), self.fc_out.b.as_ref().expect("bias"));
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.fc_in.w);
        out.push(self.fc_in.b.as_mut().expect("bias"));
        out.push(&mut self.sos);
        out.push(&mut self.null_ctx);
        out.push(&mut self.pos.t_table);
        out.push(&mut self.pos.h_table);
        out.push(&mut self.pos.w_table);
        for b in &mut self.blocks {
            out.push(&mut b.pre_attn_norm.gain);
            out.push(&mut b.pre_attn_norm.bias);
            for attn in [&mut b.attn.temporal, &mut b.attn.height, &mut b.attn.width] {
                out.push(&mut attn.w_qs);
                out.push(&mut attn.w_ks);
                out.push(&mut attn.w_vs);
                out.push(&mut attn.fc);
            }
            out.push(&mut b.pre_enc_norm.gain);
            out.push(&mut b.pre_enc_norm.bias);
            out.push(&mut b.enc_attn.w_qs);
            out.push(&mut b.enc_attn.w_ks);
            out.push(&mut b.enc_attn.w_vs);
            out.push(&mut b.enc_attn.fc);
            out.push(&mut b.pre_fc_norm.gain);
            out.push(&mut b.pre_fc_norm.bias);
            out.push(&mut b.fc0.w);
            out.push(b.fc0.b.as_mut().expect("bias"));
            out.push(&mut b.fc2.w);
            out.push(b.fc2.b.as_mut().expect("bias"));
        }
        out.push(&mut self.ln_f.gain);
        out.push(&mut self.ln_f.bias);
        out.push(&mut self.fc_out.w);
        out.push(self.fc_out.b.as_mut().expect("bias"));
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn set_named_params(&mut self, map: &HashMap<String, Tensor>) -> Result<()> {
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
