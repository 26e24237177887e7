//! The shared training loop: batched steps, cosine schedule, loss curves,
//! checkpoints, and the single/mixed-half precision split.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::OptimState;
use super::mixed::{mixed_step, LossScaler, StepOutcome};
use super::schedule::cosine_lr;
use crate::checkpoint::{save_prior, save_vqvae, PriorMeta, VqvaeMeta};
use crate::error::{Error, Result};
use crate::nncore::{grad_or_zero, precision, PrecisionMode, PrecisionPolicy, Tensor};
use crate::prior::PriorModel;
use crate::synthdata::FrameStream;
use crate::vqvae::{stack_clips, vqvae_loss, CodeGrid, VqvaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Vqvae,
    Prior,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vqvae => "vqvae",
            Stage::Prior => "prior",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Cosine horizon; defaults to the run's total step count.
    pub t_max: Option<u64>,
    /// Checkpoint every n epochs (the final state is always written when an
    /// output directory is set).
    pub checkpoint_every: Option<usize>,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    /// Stage-1 checkpoint hash echoed into stage-2 checkpoints.
    pub stage1_hash: Option<String>,
    /// Test hook: multiply the loss by 1e6 at this global step to force a
    /// gradient overflow.
    pub overflow_inject_step: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr_max: 3e-4,
            lr_min: 0.0,
            t_max: None,
            checkpoint_every: None,
            out_dir: None,
            stage1_hash: None,
            overflow_inject_step: None,
        }
    }
}

/// Everything a run leaves behind besides the updated model.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
    pub epoch_wall_clock_s: Vec<f64>,
    pub epoch_loss_scales: Vec<f64>,
    pub skipped_steps: Vec<u64>,
    pub checkpoints: Vec<PathBuf>,
    pub total_wall_clock_s: f64,
}

/// One training run over either stage.
pub enum TrainRun<'a> {
    Vqvae {
        model: &'a mut VqvaeModel,
        stream: &'a FrameStream,
        /// Window indices forming the dataset (subsampling happens here).
        windows: &'a [usize],
    },
    Prior {
        model: &'a mut PriorModel,
        codes: &'a [CodeGrid],
        /// Per sample: previous-window encoder features, or None at a
        /// stream start.
        contexts: &'a [Option<Vec<f32>>],
        samples: &'a [usize],
    },
}

impl TrainRun<'_> {
    fn stage(&self) -> Stage {
        match self {
            TrainRun::Vqvae { .. } => Stage::Vqvae,
            TrainRun::Prior { .. } => Stage::Prior,
        }
    }

    fn n_samples(&self) -> usize {
        match self {
            TrainRun::Vqvae { windows, .. } => windows.len(),
            TrainRun::Prior { samples, .. } => samples.len(),
        }
    }
}

/// Epoch loop of batched optimizer steps. Deterministic under a fixed seed
/// in single precision; on divergence the partial loss curve and a final
/// checkpoint are still written before the error propagates.
pub fn train(
    mut run: TrainRun<'_>,
    cfg: &TrainConfig,
    policy: &PrecisionPolicy,
    seed: u64,
) -> Result<TrainOutcome> {
    crate::tune_allocator();
    policy.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let n = run.n_samples();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let t_max = cfg
        .t_max
        .unwrap_or((cfg.epochs as u64 * steps_per_epoch).max(1));

    let mode = policy.mode;
    precision::with_mode(mode, || train_inner(&mut run, cfg, policy, seed, t_max))
}

fn train_inner(
    run: &mut TrainRun<'_>,
    cfg: &TrainConfig,
    policy: &PrecisionPolicy,
    seed: u64,
    t_max: u64,
) -> Result<TrainOutcome> {
    let mode = policy.mode;
    let stage = run.stage();
    let n = run.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut opt = match run {
        TrainRun::Vqvae { model, .. } => {
            let opt = OptimState::new(&model.params());
            if mode == PrecisionMode::MixedHalf {
                opt.write_params(model.params_mut(), mode);
            }
            opt
        }
        TrainRun::Prior { model, .. } => {
            let opt = OptimState::new(&model.params());
            if mode == PrecisionMode::MixedHalf {
                opt.write_params(model.params_mut(), mode);
            }
            opt
        }
    };
    let mut scaler = LossScaler::new(policy.clone());

    let mut outcome = TrainOutcome {
        epoch_losses: Vec::new(),
        epoch_lrs: Vec::new(),
        epoch_wall_clock_s: Vec::new(),
        epoch_loss_scales: Vec::new(),
        skipped_steps: Vec::new(),
        checkpoints: Vec::new(),
        total_wall_clock_s: 0.0,
    };
    let run_start = Instant::now();
    let mut global_step: u64 = 0;
    let mut abort: Option<Error> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let epoch_lr = cosine_lr(global_step, cfg.lr_max, cfg.lr_min, t_max)?;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;

        for batch in ids.chunks(cfg.batch_size) {
            let lr = cosine_lr(global_step, cfg.lr_max, cfg.lr_min, t_max)?;
            let loss = match build_loss(run, batch, &mut rng) {
                Ok(l) => l,
                Err(e) => {
                    abort = Some(e);
                    break 'epochs;
                }
            };
            let loss = match cfg.overflow_inject_step {
                Some(s) if s == global_step => loss.scale(1e6),
                _ => loss,
            };
            if loss.item().is_finite() {
                loss_sum += loss.item() * batch.len() as f64;
                loss_count += batch.len();
            }

            let applied = match mode {
                PrecisionMode::Single => {
                    let step_result = (|| -> Result<()> {
                        let params = run_params(run);
                        let refs: Vec<&Tensor> = params.iter().collect();
                        let grads = grad_or_zero(&loss, &refs)?;
                        if !loss.item().is_finite()
                            || grads.iter().any(|g| g.has_nonfinite())
                        {
                            return Err(Error::Divergence(format!(
                                "non-finite loss or gradient at step {global_step}"
                            )));
                        }
                        let grad_refs: Vec<&[f64]> =
                            grads.iter().map(|g| g.data()).collect();
                        opt.adam_step(&grad_refs, lr)?;
                        Ok(())
                    })();
                    match step_result {
                        Ok(()) => {
                            write_params(run, &opt, mode);
                            true
                        }
                        Err(e) => {
                            abort = Some(e);
                            break 'epochs;
                        }
                    }
                }
                PrecisionMode::MixedHalf => {
                    let params = run_params(run);
                    let refs: Vec<&Tensor> = params.iter().collect();
                    match mixed_step(&loss, &refs, &mut opt, &mut scaler, lr, global_step) {
                        Ok(StepOutcome::Applied) => {
                            write_params(run, &opt, mode);
                            true
                        }
                        Ok(StepOutcome::Skipped) => false,
                        Err(e) => {
                            abort = Some(e);
                            break 'epochs;
                        }
                    }
                }
            };
            if applied {
                post_step(run, &mut rng)?;
            }
            global_step += 1;
        }

        outcome
            .epoch_losses
            .push(loss_sum / loss_count.max(1) as f64);
        outcome.epoch_lrs.push(epoch_lr);
        outcome
            .epoch_wall_clock_s
            .push(epoch_start.elapsed().as_secs_f64());
        outcome.epoch_loss_scales.push(match mode {
            PrecisionMode::Single => 1.0,
            PrecisionMode::MixedHalf => scaler.scale,
        });

        if let (Some(every), Some(_)) = (cfg.checkpoint_every, cfg.out_dir.as_ref()) {
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 != cfg.epochs {
                outcome
                    .checkpoints
                    .push(write_checkpoint(run, cfg, seed, epoch + 1, &rng)?);
            }
        }
    }

    outcome.skipped_steps = scaler.skipped_steps.clone();
    outcome.total_wall_clock_s = run_start.elapsed().as_secs_f64();

    // Artifacts survive divergence aborts.
    if let Some(dir) = cfg.out_dir.as_ref() {
        std::fs::create_dir_all(dir)?;
        write_loss_curve(&outcome, &loss_curve_path(dir, stage, seed))?;
        outcome
            .checkpoints
            .push(write_checkpoint(run, cfg, seed, outcome.epoch_losses.len(), &rng)?);
    }
    match abort {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

fn run_params(run: &TrainRun<'_>) -> Vec<Tensor> {
    let refs = match run {
        TrainRun::Vqvae { model, .. } => model.params(),
        TrainRun::Prior { model, .. } => model.params(),
    };
    refs.into_iter().cloned().collect()
}

fn write_params(run: &mut TrainRun<'_>, opt: &OptimState, mode: PrecisionMode) {
    match run {
        TrainRun::Vqvae { model, .. } => opt.write_params(model.params_mut(), mode),
        TrainRun::Prior { model, .. } => opt.write_params(model.params_mut(), mode),
    }
}

/// Forward pass for one batch. For stage 1 the encoder outputs and
/// assignments are stashed so the EMA update can run after the optimizer
/// step.
fn build_loss(
    run: &mut TrainRun<'_>,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    match run {
        TrainRun::Vqvae {
            model,
            stream,
            windows,
        } => {
            let clips: Vec<_> = batch
                .iter()
                .map(|&i| stream.clip(windows[i]))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&_> = clips.iter().collect();
            let x = stack_clips(&refs)?;
            let (_, z_e) = model.encode(&x)?;
            let q = model.codebook.quantize(&z_e)?;
            let x_hat = model.decode(&q.straight_through)?;
            let terms = vqvae_loss(&x, &x_hat, &z_e, &q.z_q, model.config.beta)?;
            let assignments: Vec<u32> =
                q.codes.iter().flat_map(|cg| cg.idx.iter().copied()).collect();
            PENDING_EMA.with(|p| {
                *p.borrow_mut() = Some((z_e.data().to_vec(), assignments));
            });
            Ok(terms.total)
        }
        TrainRun::Prior {
            model,
            codes,
            contexts,
            samples,
        } => {
            let batch_codes: Vec<CodeGrid> =
                batch.iter().map(|&i| codes[samples[i]].clone()).collect();
            let widened: Vec<Option<Vec<f64>>> = batch
                .iter()
                .map(|&i| {
                    contexts[samples[i]]
                        .as_ref()
                        .map(|c| c.iter().map(|&v| v as f64).collect())
                })
                .collect();
            let entries: Vec<Option<&[f64]>> =
                widened.iter().map(|o| o.as_deref()).collect();
            let ctx = model.build_context(&entries)?;
            model.loss_on_batch(&batch_codes, &ctx, rng)
        }
    }
}

thread_local! {
    static PENDING_EMA: std::cell::RefCell<Option<(Vec<f64>, Vec<u32>)>> =
        const { std::cell::RefCell::new(None) };
}

fn post_step(run: &mut TrainRun<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    if let TrainRun::Vqvae { model, .. } = run {
        if let Some((z, assign)) = PENDING_EMA.with(|p| p.borrow_mut().take()) {
            model.codebook.ema_update(&z, &assign, rng)?;
        }
    }
    Ok(())
}

pub fn loss_curve_path(dir: &Path, stage: Stage, seed: u64) -> PathBuf {
    dir.join(format!("loss-{}-{seed}.csv", stage.name()))
}

fn write_loss_curve(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss,lr,wall_clock_s,loss_scale\n");
    for e in 0..outcome.epoch_losses.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e,
            outcome.epoch_losses[e],
            outcome.epoch_lrs[e],
            outcome.epoch_wall_clock_s[e],
            outcome.epoch_loss_scales[e],
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_checkpoint(
    run: &TrainRun<'_>,
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
    rng: &ChaCha8Rng,
) -> Result<PathBuf> {
    let dir = cfg.out_dir.as_ref().expect("out_dir checked by caller");
    std::fs::create_dir_all(dir)?;
    let stage = run.stage();
    let path = dir.join(format!("{}-{seed}-{epoch}.ckpt", stage.name()));
    match run {
        TrainRun::Vqvae { model, .. } => {
            let meta = VqvaeMeta {
                config: model.config.clone(),
                seed,
                epoch,
            };
            save_vqvae(model, &meta, rng, &path)?;
        }
        TrainRun::Prior { model, .. } => {
            let meta = PriorMeta {
                config: model.config.clone(),
                seed,
                epoch,
                vqvae_hash: cfg.stage1_hash.clone().unwrap_or_else(|| "unpinned".into()),
            };
            save_prior(model, &meta, rng, &path)?;
        }
    }
    Ok(path)
}

/// Stage-2 dataset assembly from frozen stage-1 stream outputs: window k
/// trains against the codes of window k, conditioned on window k-1.
pub fn prior_dataset(
    stream_codes: &crate::encoding::StreamCodes,
) -> (Vec<CodeGrid>, Vec<Option<Vec<f32>>>) {
    let n = stream_codes.codes.len();
    let mut contexts = Vec::with_capacity(n);
    for k in 0..n {
        contexts.push(if k == 0 {
            None
        } else {
            Some(stream_codes.contexts[k - 1].clone())
        });
    }
    (stream_codes.codes.clone(), contexts)
}

/// Stage-1 training entry: shuffle the stream's windows into a dataset.
pub fn train_vqvae_on_stream(
    model: &mut VqvaeModel,
    stream: &FrameStream,
    windows: &[usize],
    cfg: &TrainConfig,
    policy: &PrecisionPolicy,
    seed: u64,
) -> Result<TrainOutcome> {
    train(
        TrainRun::Vqvae {
            model,
            stream,
            windows,
        },
        cfg,
        policy,
        seed,
    )
}

/// Stage-2 training entry over precomputed codes and contexts.
pub fn train_prior_on_codes(
    model: &mut PriorModel,
    codes: &[CodeGrid],
    contexts: &[Option<Vec<f32>>],
    samples: &[usize],
    cfg: &TrainConfig,
    policy: &PrecisionPolicy,
    seed: u64,
) -> Result<TrainOutcome> {
    train(
        TrainRun::Prior {
            model,
            codes,
            contexts,
            samples,
        },
        cfg,
        policy,
        seed,
    )
}

/// Convenience wrapper: freeze the stage-1 model reference and train a
/// fresh prior on a stream.
pub fn train_prior_on_stream(
    prior: &mut PriorModel,
    stream: &FrameStream,
    cfg: &TrainConfig,
    policy: &PrecisionPolicy,
    seed: u64,
) -> Result<TrainOutcome> {
    let stream_codes = crate::encoding::prepare_stream(&prior.vqvae, stream)?;
    let (codes, contexts) = prior_dataset(&stream_codes);
    let samples: Vec<usize> = (0..codes.len()).collect();
    train_prior_on_codes(prior, &codes, &contexts, &samples, cfg, policy, seed)
}
