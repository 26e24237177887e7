//! Sweep execution: one frozen stage-1 model and one teacher per sweep,
//! then a stage-2 train/extract/encode cell per (value, seed), reported
//! per synthetic subject.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use super::report::ReportMeta;
use super::{BenchConfig, ResultRow, SweepSpec};
use crate::checkpoint::{config_fingerprint, file_hash, save_vqvae, VqvaeMeta};
use crate::encoding::{
    align_to_tr, encode_subject, extract_features_from, prepare_stream, FeatureMatrix,
    Provenance, StreamCodes,
};
use crate::error::{Error, Result};
use crate::nncore::PrecisionPolicy;
use crate::prior::PriorModel;
use crate::synthdata::{gen_bold, gen_video, subsample_indices, ParcelSeries, TeacherSpec};
use crate::trainer::{
    prior_dataset, train_prior_on_codes, train_vqvae_on_stream, TrainConfig,
};
use crate::vqvae::VqvaeModel;

pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub meta: ReportMeta,
}

#[derive(Serialize)]
struct CellConfig<'a> {
    axis: &'a str,
    value: &'a str,
    seed: u64,
    subject: u64,
    config: &'a BenchConfig,
}

/// Run every (value, seed) cell of a sweep. Stage 1 trains once on the base
/// data condition and is frozen throughout; teacher targets are built once,
/// so every row sees identical teacher data and the axis is the only
/// varying factor. A cell whose training diverges yields NaN-valued rows
/// instead of aborting the sweep.
pub fn run_sweep(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<SweepOutput> {
    crate::tune_allocator();
    spec.validate()?;
    let base = &spec.base;

    // Shared fixtures.
    let pool_frames = base.data.pool_clips * crate::vqvae::CLIP_LEN;
    let train_stream = gen_video(&base.scene, pool_frames)?;
    let mut eval_scene = base.scene.clone();
    eval_scene.seed = base.data.eval_scene_seed;
    let eval_stream = gen_video(&eval_scene, base.data.eval_clips * crate::vqvae::CLIP_LEN)?;

    // Stage 1, trained once and frozen.
    let mut vq = VqvaeModel::new(base.vqvae.clone(), base.seed)?;
    let stage1_windows = subsample_indices(
        base.data.pool_clips,
        base.train.stage1_clips,
        base.data.subsample_seed,
    )?;
    let stage1_cfg = TrainConfig {
        epochs: base.train.stage1_epochs,
        batch_size: base.train.batch_size,
        lr_max: base.train.lr_max,
        lr_min: base.train.lr_min,
        ..Default::default()
    };
    train_vqvae_on_stream(
        &mut vq,
        &train_stream,
        &stage1_windows,
        &stage1_cfg,
        &PrecisionPolicy::single(),
        base.seed,
    )?;
    let vq = Arc::new(vq);
    let stage1_hash = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("vqvae-{}-{}.ckpt", base.seed, base.train.stage1_epochs));
            let meta = VqvaeMeta {
                config: vq.config.clone(),
                seed: base.seed,
                epoch: base.train.stage1_epochs,
            };
            save_vqvae(
                &vq,
                &meta,
                &rand::SeedableRng::seed_from_u64(base.seed),
                &path,
            )?;
            file_hash(&path)?
        }
        None => config_fingerprint(&vq.config),
    };

    // Frozen stage-1 outputs, shared by every cell.
    let pool_codes = prepare_stream(&vq, &train_stream)?;
    let eval_codes = prepare_stream(&vq, &eval_stream)?;

    // Teacher: a separately seeded, well-trained prior defines the targets.
    let teacher_series = build_teacher_targets(spec, &vq, &pool_codes, &eval_codes)?;
    if let Some(dir) = out_dir {
        for (sid, series) in spec.subjects.iter().zip(&teacher_series) {
            series.write_csv(
                &dir.join(format!("teacher-sub{sid}.csv")),
                &dir.join(format!("teacher-sub{sid}.json")),
            )?;
        }
    }

    let mut rows = Vec::new();
    let mut n_params_by_value = Vec::new();
    for value in &spec.values {
        let resolved = spec.resolve_value(value)?;
        let tap = spec.tap_for(&resolved);
        let mut value_params: Option<usize> = None;
        for &seed in &spec.seeds {
            let cell = run_cell(
                spec, &resolved, seed, &vq, &pool_codes, &eval_codes, &tap, &stage1_hash,
            );
            match cell {
                Ok((model_params, final_loss, wall, x)) => {
                    value_params.get_or_insert(model_params);
                    for (sid, series) in spec.subjects.iter().zip(&teacher_series) {
                        let fp = config_fingerprint(&CellConfig {
                            axis: spec.axis.name(),
                            value,
                            seed,
                            subject: *sid,
                            config: &resolved,
                        });
                        let report = encode_subject(
                            &x,
                            series,
                            &format!("sub-{sid}"),
                            base.encoding.split_seed,
                            &base.encoding.lambda_grid,
                            &fp,
                        )?;
                        rows.push(ResultRow {
                            axis: spec.axis.name().to_string(),
                            value: value.clone(),
                            subject: report.subject.clone(),
                            seed,
                            mean_r: report.mean_r,
                            max_r: report.max_r,
                            final_loss,
                            wall_clock_s: wall,
                            fingerprint: fp,
                        });
                    }
                }
                Err(e @ (Error::Divergence(_) | Error::LossScaleUnderflow)) => {
                    // Failed cell: keep the bookkeeping, poison the metrics.
                    eprintln!("cell value={value} seed={seed} diverged: {e}");
                    for sid in &spec.subjects {
                        let fp = config_fingerprint(&CellConfig {
                            axis: spec.axis.name(),
                            value,
                            seed,
                            subject: *sid,
                            config: &resolved,
                        });
                        rows.push(ResultRow {
                            axis: spec.axis.name().to_string(),
                            value: value.clone(),
                            subject: format!("sub-{sid}"),
                            seed,
                            mean_r: f64::NAN,
                            max_r: f64::NAN,
                            final_loss: f64::NAN,
                            wall_clock_s: f64::NAN,
                            fingerprint: fp,
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        n_params_by_value.push((value.clone(), value_params.unwrap_or(0)));
    }

    Ok(SweepOutput {
        rows,
        meta: ReportMeta {
            axis: spec.axis.name().to_string(),
            values: spec.values.clone(),
            seeds: spec.seeds.clone(),
            subjects: spec.subjects.clone(),
            n_params_by_value,
        },
    })
}

/// Train one stage-2 cell and extract its aligned feature matrix.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    spec: &SweepSpec,
    resolved: &BenchConfig,
    seed: u64,
    vq: &Arc<VqvaeModel>,
    pool_codes: &StreamCodes,
    eval_codes: &StreamCodes,
    tap: &str,
    stage1_hash: &str,
) -> Result<(usize, f64, f64, FeatureMatrix)> {
    let base = &spec.base;
    let mut model = PriorModel::new(resolved.prior.clone(), Arc::clone(vq), seed)?;
    let n_params = model.n_params();

    let (codes, contexts) = prior_dataset(pool_codes);
    let samples = subsample_indices(
        codes.len(),
        resolved.train.stage2_clips,
        base.data.subsample_seed,
    )?;
    let cfg = TrainConfig {
        epochs: resolved.train.stage2_epochs,
        batch_size: resolved.train.batch_size,
        lr_max: resolved.train.lr_max,
        lr_min: resolved.train.lr_min,
        stage1_hash: Some(stage1_hash.to_string()),
        ..Default::default()
    };
    let policy = PrecisionPolicy::for_mode(resolved.precision);
    let outcome =
        train_prior_on_codes(&mut model, &codes, &contexts, &samples, &cfg, &policy, seed)?;
    let final_loss = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);

    let feats = extract_features_from(&model, eval_codes, tap, base.encoding.reducer)?;
    let x = align_to_tr(
        &feats,
        base.encoding.tr_seconds,
        base.encoding.delay_trs,
        Provenance {
            tap: tap.to_string(),
            reducer: base.encoding.reducer,
            delay_trs: base.encoding.delay_trs,
            tr_seconds: base.encoding.tr_seconds,
        },
    )?;
    Ok((n_params, final_loss, outcome.total_wall_clock_s, x))
}

/// Teacher pipeline: train the teacher prior once, extract its features on
/// the eval stream at zero delay, and synthesize one parcel series per
/// subject seed.
fn build_teacher_targets(
    spec: &SweepSpec,
    vq: &Arc<VqvaeModel>,
    pool_codes: &StreamCodes,
    eval_codes: &StreamCodes,
) -> Result<Vec<ParcelSeries>> {
    let base = &spec.base;
    let mut teacher = PriorModel::new(base.prior.clone(), Arc::clone(vq), base.teacher.seed)?;
    let (codes, contexts) = prior_dataset(pool_codes);
    let samples = subsample_indices(
        codes.len(),
        base.teacher.train_clips,
        base.data.subsample_seed,
    )?;
    let cfg = TrainConfig {
        epochs: base.teacher.epochs,
        batch_size: base.train.batch_size,
        lr_max: base.train.lr_max,
        lr_min: base.train.lr_min,
        ..Default::default()
    };
    train_prior_on_codes(
        &mut teacher,
        &codes,
        &contexts,
        &samples,
        &cfg,
        &PrecisionPolicy::single(),
        base.teacher.seed,
    )?;

    let teacher_tap = base.prior.default_tap();
    let feats =
        extract_features_from(&teacher, eval_codes, &teacher_tap, base.encoding.reducer)?;
    let aligned = align_to_tr(
        &feats,
        base.encoding.tr_seconds,
        0,
        Provenance {
            tap: teacher_tap.clone(),
            reducer: base.encoding.reducer,
            delay_trs: 0,
            tr_seconds: base.encoding.tr_seconds,
        },
    )?;
    // gen_bold indexes feature rows as TRs, so the teacher alignment must
    // cover a contiguous block starting at TR 0.
    if aligned.tr_indices.iter().enumerate().any(|(i, &tr)| i != tr) {
        return Err(Error::InvalidConfig(
            "teacher features must cover contiguous TRs from 0".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = (0..aligned.rows).map(|r| aligned.row(r).to_vec()).collect();

    spec.subjects
        .iter()
        .map(|&sid| {
            let teacher_spec = TeacherSpec::sparse_random(
                aligned.p,
                base.encoding.n_parcels,
                base.teacher.density,
                base.teacher.sigma,
                base.teacher.lag_trs,
                &teacher_tap,
                sid,
            );
            gen_bold(&rows, &teacher_spec, sid)
        })
        .collect()
}
