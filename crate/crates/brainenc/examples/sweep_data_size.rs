//! A small data-size sweep end to end: nested training subsets, shared
//! teacher targets, result files with plot data.
//!
//! This is a scaled-down run that finishes in a couple of minutes; the
//! full desk-scale sweep lives in the acceptance suite and the CLI
//! (`brainenc sweep --axis data_size`).
//!
//! ```bash
//! cargo run --release --example sweep_data_size
//! ```

use brainenc::bench::{
    emit_report, run_sweep, BenchConfig, ReportFormat, SweepAxis, SweepSpec,
};

fn main() -> brainenc::Result<()> {
    let out_dir = std::env::temp_dir().join("brainenc-example-sweep");
    let _ = std::fs::remove_dir_all(&out_dir);

    let mut cfg = BenchConfig::desk();
    cfg.train.stage1_clips = 64;
    cfg.train.stage1_epochs = 1;
    cfg.train.stage2_clips = 256;
    cfg.data.pool_clips = 512;
    cfg.data.eval_clips = 128;
    cfg.teacher.train_clips = 256;
    cfg.encoding.n_parcels = 16;

    let mut spec = SweepSpec::new(SweepAxis::DataSize, cfg);
    spec.values = vec!["64".into(), "256".into(), "512".into()];
    spec.seeds = vec![1, 2];
    spec.subjects = vec![101, 102];

    let output = run_sweep(&spec, Some(&out_dir))?;
    let files = emit_report(&output.rows, &output.meta, ReportFormat::Both, true, &out_dir)?;

    println!("value  subject   mean_r   max_r    final_loss");
    for r in &output.rows {
        println!(
            "{:<6} {:<9} {:+.4}  {:+.4}  {:.4}",
            r.value, r.subject, r.mean_r, r.max_r, r.final_loss
        );
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
