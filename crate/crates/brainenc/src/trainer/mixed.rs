//! Loss scaling and the skip-on-overflow step for mixed-half training.

use super::adam::OptimState;
use crate::error::{Error, Result};
use crate::nncore::{grad, precision, PrecisionPolicy, Tensor};

/// Dynamic loss scaler. Keeps the skipped-step ledger for reporting.
pub struct LossScaler {
    pub policy: PrecisionPolicy,
    pub scale: f64,
    clean_steps: u64,
    pub skipped_steps: Vec<u64>,
}

impl LossScaler {
    pub fn new(policy: PrecisionPolicy) -> LossScaler {
        LossScaler {
            scale: policy.loss_scale,
            policy,
            clean_steps: 0,
            skipped_steps: Vec::new(),
        }
    }

    fn on_overflow(&mut self, step: u64) -> Result<()> {
        self.skipped_steps.push(step);
        self.scale *= self.policy.backoff_factor;
        self.clean_steps = 0;
        if self.scale < 1.0 {
            return Err(Error::LossScaleUnderflow);
        }
        Ok(())
    }

    fn on_clean(&mut self) {
        self.clean_steps += 1;
        if self.clean_steps >= self.policy.growth_interval {
            self.scale *= 2.0;
            self.clean_steps = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

/// One mixed-half optimizer step: scale the loss, backprop through
/// half-rounded storage, skip on any non-finite scaled gradient (halving the
/// scale), otherwise unscale and apply Adam to the master weights.
///
/// Must run with the thread's precision mode already set to mixed-half so
/// the backward pass stores rounded gradients. The caller rewrites the
/// half shadow parameters afterwards via [`OptimState::write_params`].
pub fn mixed_step(
    loss: &Tensor,
    params: &[&Tensor],
    opt: &mut OptimState,
    scaler: &mut LossScaler,
    lr: f64,
    step: u64,
) -> Result<StepOutcome> {
    precision::reset_overflow();
    if !loss.item().is_finite() {
        scaler.on_overflow(step)?;
        return Ok(StepOutcome::Skipped);
    }
    let scaled = loss.scale(scaler.scale);
    let grads = grad(&scaled, params)?;
    let overflow =
        precision::overflow_seen() || grads.iter().any(|g| g.has_nonfinite());
    if overflow {
        scaler.on_overflow(step)?;
        return Ok(StepOutcome::Skipped);
    }
    // Unscale in full precision before the optimizer sees the gradients.
    let unscaled: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v / scaler.scale).collect())
        .collect();
    let refs: Vec<&[f64]> = unscaled.iter().map(|g| g.as_slice()).collect();
    opt.adam_step(&refs, lr)?;
    scaler.on_clean();
    Ok(StepOutcome::Applied)
}
