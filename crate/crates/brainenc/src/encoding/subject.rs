//! Per-subject encoding: split, per-parcel lambda selection, fit, and
//! held-out correlation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::ridge::{loo_mse_from_parts, pearson_r, RidgeSolver};
use crate::error::{Error, Result};
use crate::synthdata::ParcelSeries;

pub const DEFAULT_LAMBDA_GRID: [f64; 3] = [0.1, 1.0, 100.0];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParcelResult {
    pub parcel: usize,
    pub lambda: f64,
    pub r: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncodingReport {
    pub subject: String,
    pub parcels: Vec<ParcelResult>,
    pub max_r: f64,
    pub mean_r: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
    pub tap: String,
    pub delay_trs: usize,
    pub fingerprint: String,
}

/// Intersect feature rows with target rows by TR index.
pub fn assemble_xy(x: &FeatureMatrix, y: &ParcelSeries) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut xr = Vec::new();
    let mut yr = Vec::new();
    let mut n = 0usize;
    for (row, &tr) in x.tr_indices.iter().enumerate() {
        if tr < y.start_tr {
            continue;
        }
        let yrow = tr - y.start_tr;
        if yrow >= y.n_trs {
            continue;
        }
        xr.extend_from_slice(x.row(row));
        yr.extend_from_slice(y.row(yrow));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no overlapping TRs between X and Y".into()));
    }
    Ok((xr, yr, n))
}

/// 90/10 seeded split, per-parcel leave-one-out lambda selection on the
/// training rows, ridge fit, and Pearson r on the held-out rows.
pub fn encode_subject(
    x: &FeatureMatrix,
    y: &ParcelSeries,
    subject: &str,
    split_seed: u64,
    grid: &[f64],
    fingerprint: &str,
) -> Result<EncodingReport> {
    let (xr, yr, n) = assemble_xy(x, y)?;
    if n < 10 {
        return Err(Error::TooFewRows { need: 10, got: n });
    }
    let p = x.p;
    let np = y.n_parcels;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_train = n * 9 / 10;
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let n_test = test_idx.len();

    // Standardize features on training statistics.
    let mut mean = vec![0.0; p];
    for &i in &train_idx {
        for j in 0..p {
            mean[j] += xr[i * p + j];
        }
    }
    for m in &mut mean {
        *m /= n_train as f64;
    }
    let mut std = vec![0.0; p];
    for &i in &train_idx {
        for j in 0..p {
            let d = xr[i * p + j] - mean[j];
            std[j] += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n_train as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0; // constant feature contributes zeros after centering
        }
    }
    let standardized = |idx: &[usize]| -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            for j in 0..p {
                out.push((xr[i * p + j] - mean[j]) / std[j]);
            }
        }
        out
    };
    let x_train = standardized(&train_idx);
    let x_test = standardized(&test_idx);

    // One factorization and hat diagonal per lambda, shared by all parcels.
    let mut lambdas = grid.to_vec();
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let solvers: Vec<(f64, RidgeSolver, Vec<f64>)> = lambdas
        .iter()
        .map(|&l| {
            let s = RidgeSolver::new(&x_train, n_train, p, l)?;
            let hat = s.hat_diag();
            Ok((l, s, hat))
        })
        .collect::<Result<Vec<_>>>()?;

    let y_col = |parcel: usize, idx: &[usize]| -> Vec<f64> {
        idx.iter().map(|&i| yr[i * np + parcel]).collect()
    };

    let parcels: Vec<ParcelResult> = (0..np)
        .into_par_iter()
        .map(|parcel| {
            let ytr = y_col(parcel, &train_idx);
            let yte = y_col(parcel, &test_idx);
            let mut best: Option<(f64, f64, Vec<f64>)> = None;
            for (lambda, solver, hat) in &solvers {
                let b = solver.fit(&ytr);
                let pred = solver.predict_rows(&b);
                let mse = loo_mse_from_parts(&ytr, &pred, hat)?;
                let take = match &best {
                    None => true,
                    Some((best_mse, _, _)) => mse <= *best_mse,
                };
                if take {
                    best = Some((mse, *lambda, b));
                }
            }
            let (_, lambda, b) = best.unwrap();
            let pred: Vec<f64> = x_test
                .chunks(p)
                .map(|row| row.iter().zip(&b).map(|(a, w)| a * w).sum())
                .collect();
            let c = pearson_r(&yte, &pred)?;
            Ok(ParcelResult {
                parcel,
                lambda,
                r: c.r,
                degenerate: c.degenerate,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let max_r = parcels.iter().map(|p| p.r).fold(f64::NEG_INFINITY, f64::max);
    let mean_r = parcels.iter().map(|p| p.r).sum::<f64>() / np as f64;
    Ok(EncodingReport {
        subject: subject.to_string(),
        parcels,
        max_r,
        mean_r,
        n_train,
        n_test,
        split_seed,
        tap: x.provenance.tap.clone(),
        delay_trs: x.provenance.delay_trs,
        fingerprint: fingerprint.to_string(),
    })
}

impl EncodingReport {
    /// CSV (`subject,parcel,lambda,r`) plus a JSON summary next to it.
    pub fn write_files(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        let mut out = String::from("subject,parcel,lambda,r\n");
        for p in &self.parcels {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.subject, p.parcel, p.lambda, p.r
            ));
        }
        std::fs::write(csv_path, out)?;
        let summary = serde_json::json!({
            "subject": self.subject,
            "max_r": self.max_r,
            "mean_r": self.mean_r,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "tap": self.tap,
            "delay_trs": self.delay_trs,
        });
        std::fs::write(json_path, serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }
}
