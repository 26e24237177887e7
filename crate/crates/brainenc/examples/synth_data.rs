//! The synthetic data path: procedural video to a stream container on
//! disk, voxel series to parcel averages, and per-run z-scoring.
//!
//! ```bash
//! cargo run --release --example synth_data
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use brainenc::synthdata::{
    gen_video, parcel_average, zscore, StoredFrames, SynthSceneSpec, VoxelBlock,
};

fn main() -> brainenc::Result<()> {
    // Deterministic sprite video, written to the versioned container.
    let stream = gen_video(&SynthSceneSpec::default(), 32 * 16)?;
    let path = std::env::temp_dir().join("brainenc-example-stream.bin");
    stream.write_to(&path)?;
    let stored = StoredFrames::read_from(&path)?;
    println!(
        "stream: {} frames of {}x{} at {} fps -> {} ({} bytes), {} clip windows",
        stored.n_frames,
        stored.spec.width,
        stored.spec.height,
        stored.spec.fps,
        path.display(),
        std::fs::metadata(&path)?.len(),
        stream.n_windows(),
    );

    // Synthetic voxels: three voxels per parcel plus noise, averaged then
    // z-scored per run.
    let (n_trs, n_parcels) = (120usize, 8usize);
    let n_voxels = n_parcels * 3;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut series = vec![0.0; n_trs * n_voxels];
    for t in 0..n_trs {
        for p in 0..n_parcels {
            let signal = ((t as f64) * 0.13 + p as f64).sin() * (1.0 + p as f64 * 0.2);
            for v in 0..3 {
                series[t * n_voxels + p * 3 + v] = signal + 0.1 * rng.gen_range(-1.0..1.0);
            }
        }
    }
    let block = VoxelBlock {
        series,
        n_trs,
        n_voxels,
        labels: (0..n_voxels).map(|v| v / 3).collect(),
        n_parcels,
    };
    let mut averaged = parcel_average(&block)?;
    let runs = vec![(0, n_trs / 2), (n_trs / 2, n_trs)];
    let degenerate = zscore(&mut averaged, n_trs, n_parcels, &runs)?;
    println!(
        "parcel series: {n_trs} TRs x {n_parcels} parcels from {n_voxels} voxels, \
         two runs z-scored independently, degenerate parcels: {}",
        degenerate.iter().filter(|&&d| d).count()
    );
    for run in &runs {
        let col0: Vec<f64> = (run.0..run.1).map(|t| averaged[t * n_parcels]).collect();
        let mean: f64 = col0.iter().sum::<f64>() / col0.len() as f64;
        let var: f64 = col0.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / col0.len() as f64;
        println!(
            "  run {:?}: parcel 0 mean {mean:+.2e}, variance {var:.6}",
            run
        );
    }
    Ok(())
}
