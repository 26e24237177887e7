//! Nearest-neighbor vector quantization with EMA codebook maintenance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nncore::{normal_f64, Tensor};
use crate::vqvae::CodeGrid;

const EMA_DECAY: f64 = 0.99;
const EMA_EPS: f64 = 1e-7;

/// Code vectors plus the EMA counters `n` and running sums `z_avg` that
/// drive the update rule. The codebook carries no gradients; it only ever
/// changes through [`CodebookState::ema_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookState {
    pub n_codes: usize,
    pub embedding_dim: usize,
    pub embeddings: Vec<f64>,
    pub n: Vec<f64>,
    pub z_avg: Vec<f64>,
}

/// Output of one quantization pass.
pub struct Quantized {
    pub codes: Vec<CodeGrid>,
    /// Looked-up embeddings, detached.
    pub z_q: Tensor,
    /// `z_e + stop_gradient(z_q - z_e)`: forwards the codes, backwards the
    /// encoder.
    pub straight_through: Tensor,
}

impl CodebookState {
    pub fn init(n_codes: usize, embedding_dim: usize, rng: &mut ChaCha8Rng) -> CodebookState {
        let embeddings: Vec<f64> = (0..n_codes * embedding_dim)
            .map(|_| normal_f64(rng) * 0.02)
            .collect();
        CodebookState {
            n_codes,
            embedding_dim,
            z_avg: embeddings.clone(),
            embeddings,
            n: vec![0.0; n_codes],
        }
    }

    /// Nearest code per grid cell in squared Euclidean distance (first
    /// index wins ties).
    pub fn quantize(&self, z_e: &Tensor) -> Result<Quantized> {
        if self.n_codes == 0 {
            return Err(Error::EmptyCodebook);
        }
        let shape = z_e.shape();
        if shape.len() != 5 || shape[4] != self.embedding_dim {
            return Err(Error::ShapeMismatch(format!(
                "quantize expects [B,t,h,w,{}], got {shape:?}",
                self.embedding_dim
            )));
        }
        let (b, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let cells_per = t * h * w;
        let d = self.embedding_dim;
        let z = z_e.data();

        let code_sq: Vec<f64> = (0..self.n_codes)
            .map(|k| {
                self.embeddings[k * d..(k + 1) * d]
                    .iter()
                    .map(|v| v * v)
                    .sum()
            })
            .collect();

        let total_cells = b * cells_per;
        let mut assignments = vec![0u32; total_cells];
        let mut z_q = vec![0.0; total_cells * d];
        for cell in 0..total_cells {
            let zv = &z[cell * d..(cell + 1) * d];
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for k in 0..self.n_codes {
                let ev = &self.embeddings[k * d..(k + 1) * d];
                let dot: f64 = zv.iter().zip(ev).map(|(a, b)| a * b).sum();
                let dist = code_sq[k] - 2.0 * dot;
                if dist < best_dist {
                    best_dist = dist;
                    best = k;
                }
            }
            assignments[cell] = best as u32;
            z_q[cell * d..(cell + 1) * d]
                .copy_from_slice(&self.embeddings[best * d..(best + 1) * d]);
        }

        let codes = (0..b)
            .map(|bi| CodeGrid {
                shape: (t, h, w),
                idx: assignments[bi * cells_per..(bi + 1) * cells_per].to_vec(),
            })
            .collect();
        let z_q = Tensor::from_vec(shape.to_vec(), z_q);
        let straight_through = z_e.add(&z_q.sub(z_e).stop_gradient());
        Ok(Quantized {
            codes,
            z_q,
            straight_through,
        })
    }

    /// EMA update from one batch of encoder outputs and their assignments:
    /// decay the counts and running sums toward this batch's statistics,
    /// renormalize the embeddings by code frequency, and replant any code
    /// whose count fell below one on a random batch vector.
    pub fn ema_update(
        &mut self,
        z_flat: &[f64],
        assignments: &[u32],
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let d = self.embedding_dim;
        if assignments.is_empty() || z_flat.len() != assignments.len() * d {
            return Err(Error::EmptyBatch);
        }
        let mut n_total = vec![0.0; self.n_codes];
        let mut encode_sum = vec![0.0; self.n_codes * d];
        for (cell, &k) in assignments.iter().enumerate() {
            let k = k as usize;
            n_total[k] += 1.0;
            for j in 0..d {
                encode_sum[k * d + j] += z_flat[cell * d + j];
            }
        }
        for k in 0..self.n_codes {
            self.n[k] = EMA_DECAY * self.n[k] + (1.0 - EMA_DECAY) * n_total[k];
        }
        for i in 0..self.z_avg.len() {
            self.z_avg[i] = EMA_DECAY * self.z_avg[i] + (1.0 - EMA_DECAY) * encode_sum[i];
        }
        let n_sum: f64 = self.n.iter().sum();
        for k in 0..self.n_codes {
            let weight =
                (self.n[k] + EMA_EPS) / (n_sum + self.n_codes as f64 * EMA_EPS) * n_sum;
            for j in 0..d {
                self.embeddings[k * d + j] = self.z_avg[k * d + j] / weight;
            }
        }
        // Unused codes restart on data vectors.
        let n_vectors = assignments.len();
        for k in 0..self.n_codes {
            if self.n[k] < 1.0 {
                let pick = rng.gen_range(0..n_vectors);
                self.embeddings[k * d..(k + 1) * d]
                    .copy_from_slice(&z_flat[pick * d..(pick + 1) * d]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(99)
    }

    fn book_from(embeddings: Vec<f64>, n_codes: usize, d: usize) -> CodebookState {
        CodebookState {
            n_codes,
            embedding_dim: d,
            z_avg: embeddings.clone(),
            embeddings,
            n: vec![10.0; n_codes],
        }
    }

    #[test]
    fn nearest_by_inspection() {
        // Identity basis {e1, e2}; (0.9, 0.1) is closer to e1.
        let book = book_from(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let z = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![0.9, 0.1]);
        let q = book.quantize(&z).unwrap();
        assert_eq!(q.codes[0].idx, vec![0]);
        assert_eq!(q.z_q.data(), &[1.0, 0.0]);
    }

    #[test]
    fn exact_match_has_zero_error() {
        let book = book_from(vec![0.3, -0.4, 1.5, 0.2, 0.9, -0.9], 3, 2);
        let z = Tensor::from_vec(vec![1, 1, 1, 1, 2], vec![1.5, 0.2]);
        let q = book.quantize(&z).unwrap();
        assert_eq!(q.codes[0].idx, vec![1]);
        assert_eq!(q.straight_through.data(), &[1.5, 0.2]);
    }

    #[test]
    fn matches_brute_force_argmin() {
        let mut r = rng();
        let (n_codes, d) = (8, 5);
        for _ in 0..200 {
            let emb: Vec<f64> = (0..n_codes * d).map(|_| normal_f64(&mut r)).collect();
            let book = book_from(emb.clone(), n_codes, d);
            let zv: Vec<f64> = (0..d).map(|_| normal_f64(&mut r)).collect();
            let z = Tensor::from_vec(vec![1, 1, 1, 1, d], zv.clone());
            let got = book.quantize(&z).unwrap().codes[0].idx[0];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..n_codes {
                let dist: f64 = (0..d)
                    .map(|j| (zv[j] - emb[k * d + j]).powi(2))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            assert_eq!(got as usize, best);
        }
    }

    #[test]
    fn straight_through_passes_encoder_gradient() {
        use crate::nncore::grad;
        let book = book_from(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let z_e = Tensor::param(vec![1, 1, 1, 1, 2], vec![0.9, 0.1]);
        let q = book.quantize(&z_e).unwrap();
        // loss = sum(st^2); d/dz_e as if st == z_e, i.e. 2*z_q under the
        // straight-through rule evaluated at the quantized point.
        let loss = q.straight_through.mul(&q.straight_through).sum_all();
        let g = grad(&loss, &[&z_e]).unwrap();
        assert_eq!(g[0].data(), &[2.0 * 1.0, 2.0 * 0.0]);
    }

    #[test]
    fn ema_single_update_matches_hand_computation() {
        let d = 2;
        let mut book = book_from(vec![0.5, 0.5, -0.5, -0.5], 2, d);
        book.n = vec![3.0, 1.0];
        book.z_avg = vec![1.5, 1.5, -0.5, -0.5];
        let z = vec![1.0, 0.0, 0.0, 2.0, -1.0, -1.0];
        let assign = vec![0u32, 0, 1];
        book.ema_update(&z, &assign, &mut rng()).unwrap();

        let n0 = 0.99 * 3.0 + 0.01 * 2.0;
        let n1 = 0.99 * 1.0 + 0.01 * 1.0;
        let z00 = 0.99 * 1.5 + 0.01 * 1.0;
        let z01 = 0.99 * 1.5 + 0.01 * 2.0;
        let z10 = 0.99 * -0.5 + 0.01 * -1.0;
        let z11 = 0.99 * -0.5 + 0.01 * -1.0;
        let n_sum = n0 + n1;
        let w0 = (n0 + 1e-7) / (n_sum + 2.0 * 1e-7) * n_sum;
        let w1 = (n1 + 1e-7) / (n_sum + 2.0 * 1e-7) * n_sum;
        assert!((book.n[0] - n0).abs() < 1e-12);
        assert!((book.n[1] - n1).abs() < 1e-12);
        assert!((book.embeddings[0] - z00 / w0).abs() < 1e-12);
        assert!((book.embeddings[1] - z01 / w0).abs() < 1e-12);
        assert!((book.embeddings[2] - z10 / w1).abs() < 1e-12);
        assert!((book.embeddings[3] - z11 / w1).abs() < 1e-12);
    }

    #[test]
    fn constant_assignment_converges_to_batch_mean() {
        let d = 2;
        let mut book = book_from(vec![5.0, -5.0, 0.0, 0.0], 2, d);
        book.n = vec![2.0, 2.0];
        book.z_avg = vec![10.0, -10.0, 0.0, 0.0];
        // Every vector goes to code 0; its mean is (0.5, 1.0).
        let z = vec![0.0, 1.0, 1.0, 1.0];
        let assign = vec![0u32, 0];
        let target = [0.5, 1.0];
        let mut prev = f64::INFINITY;
        for _ in 0..1500 {
            book.ema_update(&z, &assign, &mut rng()).unwrap();
            let dist = ((book.embeddings[0] - target[0]).powi(2)
                + (book.embeddings[1] - target[1]).powi(2))
            .sqrt();
            assert!(dist <= prev + 1e-12, "distance must not increase");
            prev = dist;
        }
        assert!(prev < 1e-3, "fixed point not reached: {prev}");
    }

    #[test]
    fn starved_code_restarts_on_data() {
        let d = 2;
        let mut book = book_from(vec![9.0, 9.0, -9.0, -9.0], 2, d);
        book.n = vec![50.0, 0.5]; // code 1 decays below 1
        let z = vec![1.0, 2.0, 3.0, 4.0];
        let assign = vec![0u32, 0];
        book.ema_update(&z, &assign, &mut rng()).unwrap();
        let e1 = &book.embeddings[2..4];
        assert!(
            e1 == [1.0, 2.0] || e1 == [3.0, 4.0],
            "restarted embedding must be a batch vector, got {e1:?}"
        );
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut book = book_from(vec![1.0, 0.0], 1, 2);
        assert!(book.ema_update(&[], &[], &mut rng()).is_err());
    }
}
