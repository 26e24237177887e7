//! Train the stage-1 model on procedural sprite video and checkpoint it.
//!
//! ```bash
//! cargo run --release --example train_vqvae
//! ```

use brainenc::nncore::PrecisionPolicy;
use brainenc::synthdata::{gen_video, SynthSceneSpec};
use brainenc::trainer::{train_vqvae_on_stream, TrainConfig};
use brainenc::vqvae::{VqvaeConfig, VqvaeModel};

fn main() -> brainenc::Result<()> {
    let out = std::env::temp_dir().join("brainenc-example-vqvae");
    let scene = SynthSceneSpec::default();
    let stream = gen_video(&scene, 96 * 16)?;
    let windows: Vec<usize> = (0..stream.n_windows()).collect();

    let mut model = VqvaeModel::new(VqvaeConfig::desk(), 1)?;
    println!(
        "stage-1 model: {} parameters, {} codes x {} dims",
        model.n_params(),
        model.config.n_codes,
        model.config.embedding_dim
    );

    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        out_dir: Some(out.clone()),
        ..Default::default()
    };
    let outcome = train_vqvae_on_stream(
        &mut model,
        &stream,
        &windows,
        &cfg,
        &PrecisionPolicy::single(),
        1,
    )?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        println!(
            "epoch {epoch}: loss {loss:.6} ({:.1}s)",
            outcome.epoch_wall_clock_s[epoch]
        );
    }
    println!("checkpoint: {}", outcome.checkpoints.last().unwrap().display());
    println!("loss curve and checkpoint written under {}", out.display());
    Ok(())
}
