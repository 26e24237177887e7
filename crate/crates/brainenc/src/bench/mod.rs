//! Benchmark harness: the four scaling/precision experiments at desk
//! scale, with machine-readable results and plot data.

mod cli;
mod report;
mod sweep;

pub use cli::run_cli;
pub use report::{emit_report, parse_rows, ReportFormat};
pub use sweep::{run_sweep, SweepOutput};

use serde::{Deserialize, Serialize};

use crate::encoding::Reducer;
use crate::error::{Error, Result};
use crate::nncore::PrecisionMode;
use crate::prior::PriorConfig;
use crate::synthdata::SynthSceneSpec;
use crate::vqvae::VqvaeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    DataSize,
    HiddenDim,
    Layers,
    Heads,
    Precision,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "data_size" => Ok(SweepAxis::DataSize),
            "hidden_dim" => Ok(SweepAxis::HiddenDim),
            "layers" => Ok(SweepAxis::Layers),
            "heads" => Ok(SweepAxis::Heads),
            "precision" => Ok(SweepAxis::Precision),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis '{other}' (expected data_size, hidden_dim, layers, heads or precision)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::DataSize => "data_size",
            SweepAxis::HiddenDim => "hidden_dim",
            SweepAxis::Layers => "layers",
            SweepAxis::Heads => "heads",
            SweepAxis::Precision => "precision",
        }
    }

    /// Default desk-scale axis values.
    pub fn default_values(self) -> Vec<String> {
        let ints = |v: &[usize]| v.iter().map(|x| x.to_string()).collect();
        match self {
            SweepAxis::DataSize => ints(&[200, 800, 3200]),
            SweepAxis::HiddenDim => ints(&[6, 15, 30, 48]),
            SweepAxis::Layers => ints(&[1, 2, 4]),
            SweepAxis::Heads => ints(&[1, 2, 4]),
            SweepAxis::Precision => vec!["single".into(), "mixed-half".into()],
        }
    }
}

/// Training knobs for the harness runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainKnobs {
    pub stage1_clips: usize,
    pub stage1_epochs: usize,
    /// Stage-2 dataset size when the axis is not data_size.
    pub stage2_clips: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataKnobs {
    /// Full nested pool; every data_size value takes a prefix subset.
    pub pool_clips: usize,
    pub eval_clips: usize,
    pub eval_scene_seed: u64,
    pub subsample_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TeacherKnobs {
    /// Model-init seed of the frozen teacher prior.
    pub seed: u64,
    pub train_clips: usize,
    pub epochs: usize,
    pub sigma: f64,
    pub lag_trs: usize,
    pub density: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncodeKnobs {
    /// Tap override; None picks the mid-stack default (or the deepest
    /// block when sweeping layers).
    pub tap: Option<String>,
    pub reducer: Reducer,
    pub delay_trs: usize,
    pub tr_seconds: f64,
    pub n_parcels: usize,
    pub lambda_grid: Vec<f64>,
    pub split_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchConfig {
    pub vqvae: VqvaeConfig,
    pub prior: PriorConfig,
    pub scene: SynthSceneSpec,
    pub train: TrainKnobs,
    pub data: DataKnobs,
    pub teacher: TeacherKnobs,
    pub encoding: EncodeKnobs,
    pub precision: PrecisionMode,
    pub seed: u64,
}

impl BenchConfig {
    pub fn desk() -> BenchConfig {
        BenchConfig {
            vqvae: VqvaeConfig::desk(),
            prior: PriorConfig::desk(),
            scene: SynthSceneSpec::default(),
            train: TrainKnobs {
                stage1_clips: 160,
                stage1_epochs: 2,
                stage2_clips: 800,
                stage2_epochs: 1,
                batch_size: 16,
                lr_max: 3e-4,
                lr_min: 0.0,
            },
            data: DataKnobs {
                pool_clips: 3200,
                eval_clips: 320,
                eval_scene_seed: 9001,
                subsample_seed: 4242,
            },
            teacher: TeacherKnobs {
                seed: 7777,
                train_clips: 1600,
                epochs: 1,
                sigma: 0.0,
                lag_trs: 3,
                density: 0.3,
            },
            encoding: EncodeKnobs {
                tap: None,
                reducer: Reducer::MeanPool,
                delay_trs: 3,
                tr_seconds: 1.49,
                n_parcels: 32,
                lambda_grid: vec![0.1, 1.0, 100.0],
                split_seed: 31337,
            },
            precision: PrecisionMode::Single,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vqvae.validate()?;
        self.prior.validate()?;
        self.scene.validate()?;
        if self.vqvae.frame_height != self.scene.height
            || self.vqvae.frame_width != self.scene.width
        {
            return Err(Error::InvalidConfig(
                "scene frame size must match the vqvae config".into(),
            ));
        }
        if self.train.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.train.stage1_clips > self.data.pool_clips
            || self.train.stage2_clips > self.data.pool_clips
            || self.teacher.train_clips > self.data.pool_clips
        {
            return Err(Error::InvalidConfig(
                "training subsets cannot exceed the clip pool".into(),
            ));
        }
        if self.encoding.n_parcels == 0 || self.encoding.lambda_grid.is_empty() {
            return Err(Error::InvalidConfig(
                "need at least one parcel and one lambda".into(),
            ));
        }
        if self.encoding.tr_seconds <= 0.0 {
            return Err(Error::InvalidConfig("tr_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// One sweep: an axis, its values, shared base config, seeds and synthetic
/// subjects (teacher weight-map seeds).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub base: BenchConfig,
    pub seeds: Vec<u64>,
    pub subjects: Vec<u64>,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, base: BenchConfig) -> SweepSpec {
        let mut base = base;
        if axis == SweepAxis::HiddenDim {
            // The documented width domain includes values no head count
            // above 1 divides (e.g. 15); a single head accepts them all.
            base.prior.heads = 1;
        }
        SweepSpec {
            values: axis.default_values(),
            axis,
            base,
            seeds: vec![1, 2, 3],
            subjects: vec![101, 102, 103, 104],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.values.is_empty() || self.seeds.is_empty() || self.subjects.is_empty() {
            return Err(Error::InvalidConfig(
                "sweep needs values, seeds and subjects".into(),
            ));
        }
        for v in &self.values {
            self.resolve_value(v)?;
        }
        Ok(())
    }

    /// Base config with one axis value applied.
    pub fn resolve_value(&self, value: &str) -> Result<BenchConfig> {
        let mut cfg = self.base.clone();
        let int = || -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("axis value '{value}' is not an integer")))
        };
        match self.axis {
            SweepAxis::DataSize => {
                let n = int()?;
                if n == 0 || n > cfg.data.pool_clips {
                    return Err(Error::InvalidConfig(format!(
                        "data size {n} outside pool of {}",
                        cfg.data.pool_clips
                    )));
                }
                cfg.train.stage2_clips = n;
            }
            SweepAxis::HiddenDim => {
                cfg.prior.hidden_dim = int()?;
            }
            SweepAxis::Layers => {
                let l = int()?;
                if ![1, 2, 4, 8, 16].contains(&l) {
                    return Err(Error::InvalidConfig(format!(
                        "layers value {l} outside the documented domain {{1,2,4,8,16}}"
                    )));
                }
                cfg.prior.layers = l;
            }
            SweepAxis::Heads => {
                let h = int()?;
                if ![1, 2, 4, 8].contains(&h) {
                    return Err(Error::InvalidConfig(format!(
                        "heads value {h} outside the documented domain {{1,2,4,8}}"
                    )));
                }
                cfg.prior.heads = h;
            }
            SweepAxis::Precision => {
                cfg.precision = PrecisionMode::parse(value)?;
            }
        }
        cfg.prior.validate()?;
        Ok(cfg)
    }

    /// Tap used for a resolved cell: the deepest block when sweeping depth,
    /// otherwise the configured or default mid-stack site.
    pub fn tap_for(&self, resolved: &BenchConfig) -> String {
        if self.axis == SweepAxis::Layers {
            resolved.prior.last_block_tap()
        } else {
            resolved
                .encoding
                .tap
                .clone()
                .unwrap_or_else(|| resolved.prior.default_tap())
        }
    }
}

/// One sweep cell result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub axis: String,
    pub value: String,
    pub subject: String,
    pub seed: u64,
    pub mean_r: f64,
    pub max_r: f64,
    pub final_loss: f64,
    pub wall_clock_s: f64,
    pub fingerprint: String,
}

impl ResultRow {
    /// Bitwise float comparison, so NaN rows (failed cells) compare equal
    /// to themselves across a round-trip.
    pub fn eq_exact(&self, other: &ResultRow) -> bool {
        self.axis == other.axis
            && self.value == other.value
            && self.subject == other.subject
            && self.seed == other.seed
            && self.mean_r.to_bits() == other.mean_r.to_bits()
            && self.max_r.to_bits() == other.max_r.to_bits()
            && self.final_loss.to_bits() == other.final_loss.to_bits()
            && self.wall_clock_s.to_bits() == other.wall_clock_s.to_bits()
            && self.fingerprint == other.fingerprint
    }

    /// Everything but the timing column, which is reported, not gated.
    pub fn eq_semantic(&self, other: &ResultRow) -> bool {
        self.axis == other.axis
            && self.value == other.value
            && self.subject == other.subject
            && self.seed == other.seed
            && self.mean_r.to_bits() == other.mean_r.to_bits()
            && self.max_r.to_bits() == other.max_r.to_bits()
            && self.final_loss.to_bits() == other.final_loss.to_bits()
            && self.fingerprint == other.fingerprint
    }
}
