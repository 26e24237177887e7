//! Raster-order autoregressive sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::prior::{ForwardMode, PriorModel};
use crate::vqvae::CodeGrid;

/// Sample a full code grid, keeping `prefix` raster positions fixed.
/// Temperature scales the logits before the softmax; as it approaches zero
/// the draw becomes the greedy argmax.
pub fn sample(
    model: &PriorModel,
    prefix: &[u32],
    temperature: f64,
    ctx: Option<&crate::nncore::Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<CodeGrid> {
    assert!(temperature > 0.0, "temperature must be positive");
    let s = model.cells();
    if prefix.len() > s {
        return Err(Error::InvalidConfig(format!(
            "prefix length {} exceeds grid cells {s}",
            prefix.len()
        )));
    }
    let owned_ctx;
    let ctx = match ctx {
        Some(c) => c,
        None => {
            owned_ctx = model.null_context(1);
            &owned_ctx
        }
    };
    let c = model.n_codes;
    let mut idx = vec![0u32; s];
    idx[..prefix.len()].copy_from_slice(prefix);
    for pos in prefix.len()..s {
        let grid = CodeGrid {
            shape: model.grid,
            idx: idx.clone(),
        };
        let logits = model.forward_logits(&[grid], ctx, ForwardMode::Eval, None)?;
        let row = &logits.data()[pos * c..(pos + 1) * c];
        idx[pos] = draw(row, temperature, rng);
    }
    Ok(CodeGrid {
        shape: model.grid,
        idx,
    })
}

fn draw(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - mx) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return k as u32;
        }
    }
    (logits.len() - 1) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn low_temperature_is_greedy() {
        let logits = [0.1, 3.0, -1.0, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(draw(&logits, 1e-6, &mut rng), 1);
        }
    }

    #[test]
    fn draw_matches_softmax_within_binomial_bounds() {
        let logits = [0.5, -0.2, 1.1, 0.0];
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let probs: Vec<f64> = e.iter().map(|v| v / z).collect();
        let n = 10_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[draw(&logits, 1.0, &mut rng) as usize] += 1;
        }
        for k in 0..4 {
            let freq = counts[k] as f64 / n as f64;
            let sigma = (probs[k] * (1.0 - probs[k]) / n as f64).sqrt();
            assert!(
                (freq - probs[k]).abs() <= 3.0 * sigma,
                "class {k}: freq {freq} vs p {} (3σ {})",
                probs[k],
                3.0 * sigma
            );
        }
    }
}
