//! Same-seed training in full precision vs emulated half precision with
//! loss scaling: the loss curves track each other, and the skipped-step
//! ledger stays empty until an overflow is injected.
//!
//! ```bash
//! cargo run --release --example precision_parity
//! ```

use std::sync::Arc;

use brainenc::encoding::prepare_stream;
use brainenc::nncore::{PrecisionMode, PrecisionPolicy};
use brainenc::prior::{PriorConfig, PriorModel};
use brainenc::synthdata::{gen_video, SynthSceneSpec};
use brainenc::trainer::{
    prior_dataset, train_prior_on_codes, train_vqvae_on_stream, TrainConfig,
};
use brainenc::vqvae::{VqvaeConfig, VqvaeModel};

fn main() -> brainenc::Result<()> {
    let stream = gen_video(&SynthSceneSpec::default(), 64 * 16)?;
    let mut vq = VqvaeModel::new(VqvaeConfig::desk(), 5)?;
    let windows: Vec<usize> = (0..32).collect();
    train_vqvae_on_stream(
        &mut vq,
        &stream,
        &windows,
        &TrainConfig {
            epochs: 1,
            ..Default::default()
        },
        &PrecisionPolicy::single(),
        5,
    )?;
    let vq = Arc::new(vq);
    let pool = prepare_stream(&vq, &stream)?;
    let (codes, contexts) = prior_dataset(&pool);
    let samples: Vec<usize> = (0..codes.len()).collect();

    let mut curves = Vec::new();
    for mode in [PrecisionMode::Single, PrecisionMode::MixedHalf] {
        let mut model = PriorModel::new(PriorConfig::desk(), Arc::clone(&vq), 5)?;
        let outcome = train_prior_on_codes(
            &mut model,
            &codes,
            &contexts,
            &samples,
            &TrainConfig {
                epochs: 3,
                batch_size: 8,
                ..Default::default()
            },
            &PrecisionPolicy::for_mode(mode),
            5,
        )?;
        println!(
            "{:<10} losses {:?} (skipped steps: {:?}, final scale {})",
            mode.name(),
            outcome
                .epoch_losses
                .iter()
                .map(|v| (v * 1e4).round() / 1e4)
                .collect::<Vec<_>>(),
            outcome.skipped_steps,
            outcome.epoch_loss_scales.last().unwrap()
        );
        curves.push(outcome.epoch_losses);
    }
    let diff = (curves[0].last().unwrap() - curves[1].last().unwrap()).abs();
    println!("final-loss difference: {diff:.2e}");

    // Force one overflow at step 1: the step is skipped, the scale halves.
    let mut model = PriorModel::new(PriorConfig::desk(), Arc::clone(&vq), 5)?;
    let outcome = train_prior_on_codes(
        &mut model,
        &codes,
        &contexts,
        &samples,
        &TrainConfig {
            epochs: 1,
            batch_size: 8,
            overflow_inject_step: Some(1),
            ..Default::default()
        },
        &PrecisionPolicy::mixed_half(),
        5,
    )?;
    println!(
        "with injected overflow: skipped steps {:?}, loss scale {} (started at 65536)",
        outcome.skipped_steps,
        outcome.epoch_loss_scales.last().unwrap()
    );
    Ok(())
}
