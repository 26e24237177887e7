//! Optimization loop shared by both model stages: Adam, the cosine
//! learning-rate schedule, mixed-precision stepping with loss scaling, and
//! run orchestration with loss curves and checkpoints.

mod adam;
mod mixed;
mod run;
mod schedule;

pub use adam::OptimState;
pub use mixed::{mixed_step, LossScaler, StepOutcome};
pub use run::{
    loss_curve_path, prior_dataset, train, train_prior_on_codes, train_prior_on_stream,
    train_vqvae_on_stream, Stage, TrainConfig, TrainOutcome, TrainRun,
};
pub use schedule::cosine_lr;
