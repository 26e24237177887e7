//! Command-line orchestration. Every run writes a manifest echoing the
//! resolved configuration; exit codes are 0 on success, 1 on validation
//! errors (including bad flags), 2 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use super::report::ReportMeta;
use super::{emit_report, parse_rows, run_sweep, BenchConfig, ReportFormat, SweepAxis, SweepSpec};
use crate::checkpoint::{file_hash, load_prior, load_vqvae};
use crate::encoding::{align_to_tr, encode_subject, extract_features, Provenance};
use crate::error::{Error, Result};
use crate::nncore::{PrecisionMode, PrecisionPolicy};
use crate::prior::PriorModel;
use crate::synthdata::{gen_bold, gen_video, subsample_indices, TeacherSpec};
use crate::trainer::{train_vqvae_on_stream, TrainConfig};
use crate::vqvae::{VqvaeModel, CLIP_LEN};

#[derive(Parser)]
#[command(
    name = "brainenc",
    version,
    about = "Two-stage video transformer brain-encoding benchmark on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; defaults to the desk-scale configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// single | mixed-half
    #[arg(long)]
    precision: Option<String>,
    /// Training-set size in clips.
    #[arg(long)]
    data_size: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Activation tap name, e.g. attn_stack.attn_nets.2.post_fc_dp
    #[arg(long)]
    tap: Option<String>,
    /// Hemodynamic delay in TRs (defaults to 3).
    #[arg(long)]
    delay_trs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the stage-1 model on procedural video.
    TrainVqvae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the stage-2 prior against a frozen stage-1 checkpoint.
    TrainPrior {
        #[arg(long)]
        vqvae: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Extract TR-aligned tap activations from a trained prior.
    Extract {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the synthetic-teacher encoding pipeline end to end.
    Encode {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run one scaling or precision sweep.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values; defaults per axis.
        #[arg(long)]
        values: Option<String>,
        /// Comma-separated training seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated synthetic-subject seeds.
        #[arg(long)]
        subjects: Option<String>,
        #[arg(long, default_value_t = true)]
        plot_data: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Re-emit result files from an existing results.csv.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long, default_value = "both")]
        format: String,
        #[arg(long, default_value_t = false)]
        plot_data: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse and run; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Includes usage text; unknown flags and subcommands land here.
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::Parse(_) | Error::ShapeMismatch(_) => 1,
                _ => 2,
            }
        }
    }
}

fn resolve_config(common: &Common) -> Result<BenchConfig> {
    let mut cfg = match &common.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => BenchConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &common.precision {
        cfg.precision = PrecisionMode::parse(p)?;
    }
    if let Some(h) = common.hidden_dim {
        cfg.prior.hidden_dim = h;
    }
    if let Some(l) = common.layers {
        cfg.prior.layers = l;
    }
    if let Some(h) = common.heads {
        cfg.prior.heads = h;
    }
    if let Some(t) = &common.tap {
        cfg.encoding.tap = Some(t.clone());
    }
    if let Some(d) = common.delay_trs {
        cfg.encoding.delay_trs = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &BenchConfig,
    extra: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let doc = serde_json::json!({
        "tool": "brainenc",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
        "args": extra,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Parse(format!("bad integer '{v}'")))
        })
        .collect()
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainVqvae { common, epochs } => {
            let cfg = resolve_config(&common)?;
            let clips = common.data_size.unwrap_or(cfg.train.stage1_clips);
            let stream = gen_video(&cfg.scene, cfg.data.pool_clips.max(clips) * CLIP_LEN)?;
            let windows =
                subsample_indices(stream.n_windows(), clips, cfg.data.subsample_seed)?;
            let mut model = VqvaeModel::new(cfg.vqvae.clone(), cfg.seed)?;
            let train_cfg = TrainConfig {
                epochs: epochs.unwrap_or(cfg.train.stage1_epochs),
                batch_size: cfg.train.batch_size,
                lr_max: cfg.train.lr_max,
                lr_min: cfg.train.lr_min,
                out_dir: Some(common.out.clone()),
                ..Default::default()
            };
            let policy = PrecisionPolicy::for_mode(cfg.precision);
            let outcome = train_vqvae_on_stream(
                &mut model, &stream, &windows, &train_cfg, &policy, cfg.seed,
            )?;
            write_manifest(
                &common.out,
                "train-vqvae",
                &cfg,
                serde_json::json!({
                    "clips": clips,
                    "checkpoints": outcome.checkpoints,
                    "final_loss": outcome.epoch_losses.last(),
                }),
            )
        }
        Cmd::TrainPrior {
            vqvae,
            common,
            epochs,
        } => {
            let cfg = resolve_config(&common)?;
            let (vq_model, _, _) = load_vqvae(&vqvae)?;
            let vq = Arc::new(vq_model);
            let clips = common.data_size.unwrap_or(cfg.train.stage2_clips);
            let stream = gen_video(&cfg.scene, cfg.data.pool_clips.max(clips) * CLIP_LEN)?;
            let mut model = PriorModel::new(cfg.prior.clone(), Arc::clone(&vq), cfg.seed)?;
            let stream_codes = crate::encoding::prepare_stream(&vq, &stream)?;
            let (codes, contexts) = crate::trainer::prior_dataset(&stream_codes);
            let samples = subsample_indices(codes.len(), clips, cfg.data.subsample_seed)?;
            let train_cfg = TrainConfig {
                epochs: epochs.unwrap_or(cfg.train.stage2_epochs),
                batch_size: cfg.train.batch_size,
                lr_max: cfg.train.lr_max,
                lr_min: cfg.train.lr_min,
                out_dir: Some(common.out.clone()),
                stage1_hash: Some(file_hash(&vqvae)?),
                ..Default::default()
            };
            let policy = PrecisionPolicy::for_mode(cfg.precision);
            let outcome = crate::trainer::train_prior_on_codes(
                &mut model, &codes, &contexts, &samples, &train_cfg, &policy, cfg.seed,
            )?;
            write_manifest(
                &common.out,
                "train-prior",
                &cfg,
                serde_json::json!({
                    "clips": clips,
                    "vqvae": vqvae,
                    "checkpoints": outcome.checkpoints,
                    "final_loss": outcome.epoch_losses.last(),
                }),
            )
        }
        Cmd::Extract {
            vqvae,
            prior,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let (model, tap, feats) = extract_pipeline(&vqvae, &prior, &common, &cfg)?;
            let x = align_to_tr(
                &feats,
                cfg.encoding.tr_seconds,
                cfg.encoding.delay_trs,
                Provenance {
                    tap: tap.clone(),
                    reducer: cfg.encoding.reducer,
                    delay_trs: cfg.encoding.delay_trs,
                    tr_seconds: cfg.encoding.tr_seconds,
                },
            )?;
            std::fs::create_dir_all(&common.out)?;
            let mut out = String::from("tr");
            for j in 0..x.p {
                out.push_str(&format!(",f{j}"));
            }
            out.push('\n');
            for r in 0..x.rows {
                out.push_str(&x.tr_indices[r].to_string());
                for v in x.row(r) {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
            std::fs::write(common.out.join("features.csv"), out)?;
            write_manifest(
                &common.out,
                "extract",
                &cfg,
                serde_json::json!({
                    "vqvae": vqvae,
                    "prior": prior,
                    "tap": tap,
                    "rows": x.rows,
                    "p": x.p,
                    "registry": model.registry_dump(),
                }),
            )
        }
        Cmd::Encode {
            vqvae,
            prior,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let (_model, tap, feats) = extract_pipeline(&vqvae, &prior, &common, &cfg)?;
            let x = align_to_tr(
                &feats,
                cfg.encoding.tr_seconds,
                cfg.encoding.delay_trs,
                Provenance {
                    tap: tap.clone(),
                    reducer: cfg.encoding.reducer,
                    delay_trs: cfg.encoding.delay_trs,
                    tr_seconds: cfg.encoding.tr_seconds,
                },
            )?;
            // Ground-truth-bearing targets: the model's own zero-delay
            // features through a known sparse map at the teacher lag.
            let zero = align_to_tr(
                &feats,
                cfg.encoding.tr_seconds,
                0,
                Provenance {
                    tap: tap.clone(),
                    reducer: cfg.encoding.reducer,
                    delay_trs: 0,
                    tr_seconds: cfg.encoding.tr_seconds,
                },
            )?;
            let rows: Vec<Vec<f64>> = (0..zero.rows).map(|r| zero.row(r).to_vec()).collect();
            let teacher = TeacherSpec::sparse_random(
                zero.p,
                cfg.encoding.n_parcels,
                cfg.teacher.density,
                cfg.teacher.sigma,
                cfg.teacher.lag_trs,
                &tap,
                cfg.seed,
            );
            let series = gen_bold(&rows, &teacher, cfg.seed)?;
            let report = encode_subject(
                &x,
                &series,
                &format!("sub-{}", cfg.seed),
                cfg.encoding.split_seed,
                &cfg.encoding.lambda_grid,
                &crate::checkpoint::config_fingerprint(&cfg),
            )?;
            std::fs::create_dir_all(&common.out)?;
            report.write_files(
                &common.out.join("report.csv"),
                &common.out.join("summary.json"),
            )?;
            write_manifest(
                &common.out,
                "encode",
                &cfg,
                serde_json::json!({
                    "vqvae": vqvae,
                    "prior": prior,
                    "tap": tap,
                    "mean_r": report.mean_r,
                    "max_r": report.max_r,
                }),
            )
        }
        Cmd::Sweep {
            axis,
            values,
            seeds,
            subjects,
            plot_data,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let axis = SweepAxis::parse(&axis)?;
            let mut spec = SweepSpec::new(axis, cfg.clone());
            if let Some(v) = values {
                spec.values = v.split(',').map(|s| s.trim().to_string()).collect();
            }
            if let Some(s) = seeds {
                spec.seeds = parse_u64_list(&s)?;
            }
            if let Some(s) = subjects {
                spec.subjects = parse_u64_list(&s)?;
            }
            spec.validate()?;
            let output = run_sweep(&spec, Some(&common.out))?;
            emit_report(
                &output.rows,
                &output.meta,
                ReportFormat::Both,
                plot_data,
                &common.out,
            )?;
            write_manifest(
                &common.out,
                "sweep",
                &cfg,
                serde_json::json!({
                    "axis": spec.axis.name(),
                    "values": spec.values,
                    "seeds": spec.seeds,
                    "subjects": spec.subjects,
                    "rows": output.rows.len(),
                }),
            )
        }
        Cmd::Report {
            rows,
            format,
            plot_data,
            out,
        } => {
            let parsed = parse_rows(&rows)?;
            let axis = parsed
                .first()
                .map(|r| r.axis.clone())
                .ok_or_else(|| Error::Empty("results file has no rows".into()))?;
            let meta = ReportMeta {
                axis,
                ..Default::default()
            };
            emit_report(&parsed, &meta, ReportFormat::parse(&format)?, plot_data, &out)?;
            Ok(())
        }
    }
}

/// Shared extract flow: load checkpoints, build the eval stream, tap every
/// window. Alignment (delay choice) is left to the caller.
fn extract_pipeline(
    vqvae: &Path,
    prior: &Path,
    common: &Common,
    cfg: &BenchConfig,
) -> Result<(PriorModel, String, Vec<crate::encoding::WindowFeature>)> {
    let (vq_model, _, _) = load_vqvae(vqvae)?;
    let vq = Arc::new(vq_model);
    let hash = file_hash(vqvae)?;
    let (model, _, _) = load_prior(prior, Arc::clone(&vq), Some(&hash))?;
    let tap = common
        .tap
        .clone()
        .or_else(|| cfg.encoding.tap.clone())
        .unwrap_or_else(|| model.config.default_tap());
    let mut eval_scene = cfg.scene.clone();
    eval_scene.seed = cfg.data.eval_scene_seed;
    let stream = gen_video(&eval_scene, cfg.data.eval_clips * CLIP_LEN)?;
    let feats = extract_features(&model, &stream, &tap, cfg.encoding.reducer)?;
    Ok((model, tap, feats))
}
