//! Adam with bias correction over full-precision master weights.

use crate::error::{Error, Result};
use crate::nncore::{precision, PrecisionMode, Tensor};

pub struct OptimState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    shapes: Vec<Vec<usize>>,
    master: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    /// Snapshot master weights from the model's current parameters.
    pub fn new(params: &[&Tensor]) -> OptimState {
        OptimState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
            master: params.iter().map(|p| p.data().to_vec()).collect(),
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn master(&self) -> &[Vec<f64>] {
        &self.master
    }

    /// One bias-corrected Adam step on the master weights. Non-finite
    /// gradients signal divergence.
    pub fn adam_step(&mut self, grads: &[&[f64]], lr: f64) -> Result<()> {
        assert_eq!(grads.len(), self.master.len(), "gradient count mismatch");
        for g in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence("non-finite gradient".into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((w, g), (m, v)) in self
            .master
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Rewrite model parameters from the master copy. Mixed-half mode
    /// stores the rounded shadow; single mode stores the master verbatim.
    pub fn write_params(&self, params: Vec<&mut Tensor>, mode: PrecisionMode) {
        assert_eq!(params.len(), self.master.len());
        for ((p, w), shape) in params.into_iter().zip(&self.master).zip(&self.shapes) {
            let mut data = w.clone();
            if mode == PrecisionMode::MixedHalf {
                precision::round_half_slice(&mut data);
            }
            *p = Tensor::param(shape.clone(), data);
        }
    }
}
