//! Two-stage training: fit the stage-1 model, freeze it, then train the
//! autoregressive prior over its discrete codes.
//!
//! ```bash
//! cargo run --release --example train_prior
//! ```

use std::sync::Arc;

use brainenc::encoding::prepare_stream;
use brainenc::nncore::PrecisionPolicy;
use brainenc::prior::{PriorConfig, PriorModel};
use brainenc::synthdata::{gen_video, SynthSceneSpec};
use brainenc::trainer::{
    prior_dataset, train_prior_on_codes, train_vqvae_on_stream, TrainConfig,
};
use brainenc::vqvae::{VqvaeConfig, VqvaeModel};

fn main() -> brainenc::Result<()> {
    let stream = gen_video(&SynthSceneSpec::default(), 128 * 16)?;
    let windows: Vec<usize> = (0..stream.n_windows()).collect();

    let mut vq = VqvaeModel::new(VqvaeConfig::desk(), 1)?;
    println!("training stage 1 ({} clips)...", windows.len());
    train_vqvae_on_stream(
        &mut vq,
        &stream,
        &windows,
        &TrainConfig {
            epochs: 2,
            ..Default::default()
        },
        &PrecisionPolicy::single(),
        1,
    )?;

    // Freeze stage 1 and lower the stream to codes + conditioning contexts.
    let vq = Arc::new(vq);
    let stream_codes = prepare_stream(&vq, &stream)?;
    let (codes, contexts) = prior_dataset(&stream_codes);
    let samples: Vec<usize> = (0..codes.len()).collect();

    let mut prior = PriorModel::new(PriorConfig::desk(), Arc::clone(&vq), 2)?;
    println!(
        "training stage 2: {} parameters over a {:?} code grid, {} codes",
        prior.n_params(),
        prior.grid,
        prior.n_codes
    );
    let outcome = train_prior_on_codes(
        &mut prior,
        &codes,
        &contexts,
        &samples,
        &TrainConfig {
            epochs: 4,
            batch_size: 16,
            ..Default::default()
        },
        &PrecisionPolicy::single(),
        2,
    )?;
    let uniform = (prior.n_codes as f64).ln();
    println!("uniform baseline: ln({}) = {uniform:.4}", prior.n_codes);
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {epoch}: cross-entropy {loss:.4}");
    }
    Ok(())
}
