//! Two-stage video-transformer brain encoding on synthetic data.
//!
//! Stage 1 compresses 16-frame clips into a discrete space-time code grid
//! (strided 3-D convs + axial-attention residual blocks + EMA codebook);
//! stage 2 is a causal transformer prior over those codes with named
//! activation taps; the encoding tail ridge-regresses tapped activations
//! onto teacher-generated parcel BOLD at a hemodynamic delay; and the
//! bench harness reruns the scaling/precision experiments.
//!
//! ## Examples
//!
//! One runnable example per capability; start with the training pair:
//!
//! - **`train_vqvae`** — stage-1 training with loss curve and checkpoint
//! - **`train_prior`** — two-stage training, cross-entropy vs the uniform
//!   baseline
//! - **`sample_codes`** — autoregressive sampling, decoded back to frames
//! - **`tap_registry`** — activation tap names and shapes per preset
//! - **`extract_align`** — window features and TR alignment with delay
//! - **`encode_subject`** — ground-truth recovery across candidate delays
//! - **`precision_parity`** — full precision vs emulated half with loss
//!   scaling, including a forced-overflow skip
//! - **`sweep_data_size`** — a small sweep emitting CSV/JSON + plot data
//! - **`synth_data`** — stream containers, parcel averaging, z-scoring
//!
//! ```bash
//! cargo run --release --example train_vqvae
//! ```
//!
//! The `brainenc` binary exposes the same flows as subcommands
//! (`train-vqvae`, `train-prior`, `extract`, `encode`, `sweep`, `report`).

pub mod bench;
pub mod checkpoint;
pub mod container;
pub mod encoding;
pub mod error;
pub mod nncore;
pub mod prior;
pub mod synthdata;
pub mod trainer;
pub mod vqvae;

pub use error::{Error, Result};

/// Raise the glibc mmap threshold so the large transient tensor buffers
/// recycle through the heap instead of round-tripping pages to the kernel
/// every step. Idempotent; a no-op on other allocators. Training and sweep
/// entry points call this themselves.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        use std::sync::Once;
        static ONCE: Once = Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        });
    }
}
