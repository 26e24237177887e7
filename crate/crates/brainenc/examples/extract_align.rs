//! Extract tap activations per 16-frame window and align them to the fMRI
//! sampling grid with a hemodynamic delay.
//!
//! ```bash
//! cargo run --release --example extract_align
//! ```

use std::sync::Arc;

use brainenc::encoding::{align_to_tr, extract_features, Provenance, Reducer};
use brainenc::prior::{PriorConfig, PriorModel};
use brainenc::synthdata::{gen_video, SynthSceneSpec};
use brainenc::vqvae::{VqvaeConfig, VqvaeModel};

fn main() -> brainenc::Result<()> {
    let vq = Arc::new(VqvaeModel::new(VqvaeConfig::desk(), 1)?);
    let prior = PriorModel::new(PriorConfig::desk(), Arc::clone(&vq), 2)?;
    let stream = gen_video(&SynthSceneSpec::default(), 96 * 16)?;
    let tap = prior.config.default_tap();

    for reducer in [Reducer::MeanPool, Reducer::Flatten] {
        let feats = extract_features(&prior, &stream, &tap, reducer)?;
        println!(
            "{reducer:?}: {} windows, {} features per window (first center at {:.2}s)",
            feats.len(),
            feats[0].values.len(),
            feats[0].center_time
        );
    }

    let feats = extract_features(&prior, &stream, &tap, Reducer::MeanPool)?;
    for delay in [0usize, 3] {
        let x = align_to_tr(
            &feats,
            1.49,
            delay,
            Provenance {
                tap: tap.clone(),
                reducer: Reducer::MeanPool,
                delay_trs: delay,
                tr_seconds: 1.49,
            },
        )?;
        println!(
            "delay {delay} TRs: {} rows x {} features, first row predicts TR {} (~{:.2}s)",
            x.rows,
            x.p,
            x.tr_indices[0],
            x.tr_indices[0] as f64 * 1.49
        );
    }
    Ok(())
}
