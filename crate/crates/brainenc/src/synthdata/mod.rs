//! Ground-truth-bearing stand-ins for gameplay video and fMRI: procedural
//! sprite video, teacher-driven parcel BOLD synthesis, z-scoring, parcel
//! averaging, and nested dataset subsampling.

mod bold;
mod video;

pub use bold::{gen_bold, parcel_average, zscore, ParcelSeries, TeacherSpec, VoxelBlock};
pub use video::{gen_video, FrameStream, StoredFrames, SynthSceneSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded uniform subsample without replacement, order-stable: one
/// permutation is drawn per seed and prefixes of it select the rows, so
/// growing `n` strictly grows the selected set.
pub fn subsample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::InvalidConfig(format!(
            "subsample of {n} from {len} items"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng);
    let mut pick: Vec<usize> = perm.into_iter().take(n).collect();
    pick.sort_unstable();
    Ok(pick)
}

pub fn subsample<T: Clone>(data: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    Ok(subsample_indices(data.len(), n, seed)?
        .into_iter()
        .map(|i| data[i].clone())
        .collect())
}
