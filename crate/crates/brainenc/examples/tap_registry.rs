//! Print the activation-tap registry (layer names and shapes) for the desk
//! and full-size presets.
//!
//! ```bash
//! cargo run --release --example tap_registry
//! ```

use std::sync::Arc;

use brainenc::prior::{PriorConfig, PriorModel};
use brainenc::vqvae::{VqvaeConfig, VqvaeModel};

fn main() -> brainenc::Result<()> {
    for (label, vq_cfg, prior_cfg) in [
        ("desk", VqvaeConfig::desk(), PriorConfig::desk()),
        ("full-scale", VqvaeConfig::full_scale(), PriorConfig::full_scale()),
    ] {
        let vq = Arc::new(VqvaeModel::new(vq_cfg, 0)?);
        let prior = PriorModel::new(prior_cfg, vq, 0)?;
        println!(
            "== {label} preset: {} layers, hidden {}, grid {:?}, default tap {}",
            prior.config.layers,
            prior.config.hidden_dim,
            prior.grid,
            prior.config.default_tap()
        );
        // Block 0 in full, the rest summarized.
        for (name, shape) in prior.layer_registry() {
            if name.contains(".0.") || name.ends_with("post_fc_dp") {
                println!("  {name} {shape:?}");
            }
        }
        println!();
    }
    Ok(())
}
