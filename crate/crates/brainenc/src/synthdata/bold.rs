//! Teacher-driven BOLD synthesis, z-scoring, and parcel averaging.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::normal_f64;

/// Known linear map from teacher features to parcels, plus noise and lag.
/// Makes the encoding experiment exactly checkable: recovery of `w_true`
/// and of the lag are ground truth, not hope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSpec {
    /// `p x n_parcels`, row-major.
    pub w_true: Vec<f64>,
    pub p: usize,
    pub n_parcels: usize,
    pub sigma: f64,
    pub lag_trs: usize,
    /// Tap the teacher features came from (provenance only).
    pub tap: String,
}

impl TeacherSpec {
    /// Sparse random map with at least one nonzero weight per parcel.
    pub fn sparse_random(
        p: usize,
        n_parcels: usize,
        density: f64,
        sigma: f64,
        lag_trs: usize,
        tap: &str,
        seed: u64,
    ) -> TeacherSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; p * n_parcels];
        for col in 0..n_parcels {
            for row in 0..p {
                if rng.gen::<f64>() < density {
                    w[row * n_parcels + col] = normal_f64(&mut rng);
                }
            }
            // Guarantee support.
            let row = rng.gen_range(0..p);
            if w[row * n_parcels + col] == 0.0 {
                w[row * n_parcels + col] = normal_f64(&mut rng) + 0.5;
            }
        }
        TeacherSpec {
            w_true: w,
            p,
            n_parcels,
            sigma,
            lag_trs,
            tap: tap.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_true.len() != self.p * self.n_parcels {
            return Err(Error::ShapeMismatch("teacher weight map shape".into()));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidConfig("sigma must be non-negative".into()));
        }
        for col in 0..self.n_parcels {
            if (0..self.p).all(|row| self.w_true[row * self.n_parcels + col] == 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "parcel {col} has no nonzero teacher weight"
                )));
            }
        }
        Ok(())
    }
}

/// Z-scored parcel time series with run boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ParcelSeries {
    /// `n_trs x n_parcels`, row-major.
    pub y: Vec<f64>,
    pub n_trs: usize,
    pub n_parcels: usize,
    /// TR index of row 0 (rows before the teacher lag are dropped).
    pub start_tr: usize,
    /// Half-open row ranges, one per run.
    pub runs: Vec<(usize, usize)>,
    /// Parcels whose variance degenerated during z-scoring.
    pub degenerate: Vec<bool>,
}

impl ParcelSeries {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.y[r * self.n_parcels..(r + 1) * self.n_parcels]
    }

    /// One column per parcel; run boundaries go to the sidecar JSON.
    pub fn write_csv(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.n_parcels).map(|p| format!("parcel{p}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for r in 0..self.n_trs {
            let cells: Vec<String> = self.row(r).iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        std::fs::write(csv_path, out)?;
        let sidecar = serde_json::json!({
            "start_tr": self.start_tr,
            "runs": self.runs,
            "degenerate": self.degenerate,
        });
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// Per-run, per-column z-score (population std, eps-guarded). Constant
/// columns flag as degenerate and zero out.
pub fn zscore(
    data: &mut [f64],
    rows: usize,
    cols: usize,
    runs: &[(usize, usize)],
) -> Result<Vec<bool>> {
    assert_eq!(data.len(), rows * cols, "zscore shape mismatch");
    let mut degenerate = vec![false; cols];
    for &(start, end) in runs {
        let n = end - start;
        if n < 2 {
            return Err(Error::TooFewRows { need: 2, got: n });
        }
        for c in 0..cols {
            let mut mean = 0.0;
            for r in start..end {
                mean += data[r * cols + c];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for r in start..end {
                let d = data[r * cols + c] - mean;
                var += d * d;
            }
            var /= n as f64;
            let std = var.sqrt();
            if std < 1e-12 {
                degenerate[c] = true;
                for r in start..end {
                    data[r * cols + c] = 0.0;
                }
            } else {
                for r in start..end {
                    data[r * cols + c] = (data[r * cols + c] - mean) / std;
                }
            }
        }
    }
    Ok(degenerate)
}

/// `y[k] = features[k - lag] . w_true + sigma * noise`, then z-scored per
/// parcel over the (single) run. Row 0 of the result sits at TR `lag`.
pub fn gen_bold(
    features: &[Vec<f64>],
    teacher: &TeacherSpec,
    noise_seed: u64,
) -> Result<ParcelSeries> {
    teacher.validate()?;
    if features.len() <= teacher.lag_trs {
        return Err(Error::TooFewRows {
            need: teacher.lag_trs + 1,
            got: features.len(),
        });
    }
    let n_trs = features.len() - teacher.lag_trs;
    let np = teacher.n_parcels;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut y = vec![0.0; n_trs * np];
    for k in 0..n_trs {
        let feat = &features[k]; // source row at TR (k + lag) - lag
        if feat.len() != teacher.p {
            return Err(Error::ShapeMismatch(format!(
                "feature row has {} values, teacher expects {}",
                feat.len(),
                teacher.p
            )));
        }
        for c in 0..np {
            let mut acc = 0.0;
            for (r, f) in feat.iter().enumerate() {
                acc += f * teacher.w_true[r * np + c];
            }
            if teacher.sigma > 0.0 {
                acc += teacher.sigma * normal_f64(&mut rng);
            }
            y[k * np + c] = acc;
        }
    }
    let runs = vec![(0usize, n_trs)];
    let degenerate = zscore(&mut y, n_trs, np, &runs)?;
    Ok(ParcelSeries {
        y,
        n_trs,
        n_parcels: np,
        start_tr: teacher.lag_trs,
        runs,
        degenerate,
    })
}

/// Voxel-level series with a voxel -> parcel labeling.
#[derive(Debug, Clone)]
pub struct VoxelBlock {
    /// `n_trs x n_voxels`, row-major.
    pub series: Vec<f64>,
    pub n_trs: usize,
    pub n_voxels: usize,
    pub labels: Vec<usize>,
    pub n_parcels: usize,
}

/// Average voxel columns within each parcel (pre-z-score).
pub fn parcel_average(block: &VoxelBlock) -> Result<Vec<f64>> {
    if block.labels.len() != block.n_voxels {
        return Err(Error::ShapeMismatch("one label per voxel".into()));
    }
    let mut counts = vec![0usize; block.n_parcels];
    for &l in &block.labels {
        if l >= block.n_parcels {
            return Err(Error::InvalidConfig(format!("label {l} out of range")));
        }
        counts[l] += 1;
    }
    if let Some(p) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Empty(format!("parcel {p} has no voxels")));
    }
    let mut out = vec![0.0; block.n_trs * block.n_parcels];
    for r in 0..block.n_trs {
        for v in 0..block.n_voxels {
            out[r * block.n_parcels + block.labels[v]] +=
                block.series[r * block.n_voxels + v];
        }
        for p in 0..block.n_parcels {
            out[r * block.n_parcels + p] /= counts[p] as f64;
        }
    }
    Ok(out)
}
