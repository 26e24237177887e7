//! Checkpoint files for both model stages.
//!
//! A checkpoint carries a config echo, every named parameter tensor, the
//! codebook state (stage 1), the training RNG state, and for stage 2 a
//! content hash pinning the frozen stage-1 reference. Identical runs write
//! byte-identical files.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{fnv1a64, Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::prior::{PriorConfig, PriorModel};
use crate::vqvae::{VqvaeConfig, VqvaeModel};

const KIND_VQVAE: &[u8; 4] = b"VQV1";
const KIND_PRIOR: &[u8; 4] = b"PRI1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqvaeMeta {
    pub config: VqvaeConfig,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorMeta {
    pub config: PriorConfig,
    pub seed: u64,
    pub epoch: usize,
    /// FNV-1a hash of the stage-1 checkpoint bytes this model was trained
    /// against.
    pub vqvae_hash: String,
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(48);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_bytes(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 48 {
        return Err(Error::Format("bad rng state length".into()));
    }
    let seed: [u8; 32] = bytes[..32].try_into().unwrap();
    let pos = u128::from_le_bytes(bytes[32..].try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(pos);
    Ok(rng)
}

pub fn save_vqvae(
    model: &VqvaeModel,
    meta: &VqvaeMeta,
    rng: &ChaCha8Rng,
    path: &Path,
) -> Result<()> {
    let mut w = ContainerWriter::new(KIND_VQVAE);
    w.add_json("meta", meta)?;
    for (name, t) in model.named_params() {
        w.add_tensor(&format!("param:{name}"), t);
    }
    w.add_f64s("codebook.embeddings", &model.codebook.embeddings);
    w.add_f64s("codebook.n", &model.codebook.n);
    w.add_f64s("codebook.z_avg", &model.codebook.z_avg);
    w.add_bytes("rng", rng_bytes(rng));
    w.write_to(path)
}

pub fn load_vqvae(path: &Path) -> Result<(VqvaeModel, VqvaeMeta, ChaCha8Rng)> {
    let c = Container::read_from(path)?;
    if &c.kind != KIND_VQVAE {
        return Err(Error::Format("not a stage-1 checkpoint".into()));
    }
    let meta: VqvaeMeta = c.json("meta")?;
    let mut model = VqvaeModel::new(meta.config.clone(), meta.seed)?;
    let mut map = HashMap::new();
    for name in c.section_names() {
        if let Some(stripped) = name.strip_prefix("param:") {
            map.insert(stripped.to_string(), c.tensor(name)?);
        }
    }
    model.set_named_params(&map)?;
    model.codebook.embeddings = c.f64s("codebook.embeddings")?;
    model.codebook.n = c.f64s("codebook.n")?;
    model.codebook.z_avg = c.f64s("codebook.z_avg")?;
    let expect = model.codebook.n_codes * model.codebook.embedding_dim;
    if model.codebook.embeddings.len() != expect
        || model.codebook.z_avg.len() != expect
        || model.codebook.n.len() != model.codebook.n_codes
    {
        return Err(Error::Format("codebook state shape mismatch".into()));
    }
    let rng = rng_from_bytes(c.section("rng")?)?;
    Ok((model, meta, rng))
}

/// Hash of a checkpoint file's bytes, the reference embedded in stage-2
/// checkpoints.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(format!("{:016x}", fnv1a64(&std::fs::read(path)?)))
}

pub fn save_prior(
    model: &PriorModel,
    meta: &PriorMeta,
    rng: &ChaCha8Rng,
    path: &Path,
) -> Result<()> {
    let mut w = ContainerWriter::new(KIND_PRIOR);
    w.add_json("meta", meta)?;
    for (name, t) in model.named_params() {
        w.add_tensor(&format!("param:{name}"), t);
    }
    w.add_bytes("rng", rng_bytes(rng));
    w.write_to(path)
}

/// Load a stage-2 checkpoint against its frozen stage-1 model. The hash of
/// the stage-1 checkpoint must match the reference stored at save time;
/// pass `None` to skip the check (e.g. when the stage-1 file moved).
pub fn load_prior(
    path: &Path,
    vqvae: Arc<VqvaeModel>,
    vqvae_hash: Option<&str>,
) -> Result<(PriorModel, PriorMeta, ChaCha8Rng)> {
    let c = Container::read_from(path)?;
    if &c.kind != KIND_PRIOR {
        return Err(Error::Format("not a stage-2 checkpoint".into()));
    }
    let meta: PriorMeta = c.json("meta")?;
    if let Some(h) = vqvae_hash {
        if h != meta.vqvae_hash {
            return Err(Error::Format(format!(
                "stage-1 reference mismatch: checkpoint expects {}, got {h}",
                meta.vqvae_hash
            )));
        }
    }
    let mut model = PriorModel::new(meta.config.clone(), vqvae, meta.seed)?;
    let mut map = HashMap::new();
    for name in c.section_names() {
        if let Some(stripped) = name.strip_prefix("param:") {
            map.insert(stripped.to_string(), c.tensor(name)?);
        }
    }
    model.set_named_params(&map)?;
    let rng = rng_from_bytes(c.section("rng")?)?;
    Ok((model, meta, rng))
}

/// Fingerprint of any serializable config: FNV-1a over its canonical JSON.
pub fn config_fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    format!("{:016x}", fnv1a64(&json))
}
