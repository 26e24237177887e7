//! Result files: CSV rows, a JSON report with sweep metadata, and per-axis
//! plot data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ResultRow;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "axis,value,subject,seed,mean_r,max_r,final_loss,wall_clock_s,fingerprint";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Both,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<ReportFormat> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "both" => Ok(ReportFormat::Both),
            other => Err(Error::InvalidConfig(format!(
                "report format must be csv, json or both, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ReportMeta {
    pub axis: String,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub subjects: Vec<u64>,
    pub n_params_by_value: Vec<(String, usize)>,
}

/// Write the result files and return their paths.
pub fn emit_report(
    rows: &[ResultRow],
    meta: &ReportMeta,
    format: ReportFormat,
    plot_data: bool,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Empty("no result rows to emit".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        let path = dir.join("results.csv");
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.axis,
                r.value,
                r.subject,
                r.seed,
                r.mean_r,
                r.max_r,
                r.final_loss,
                r.wall_clock_s,
                r.fingerprint
            ));
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }

    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let path = dir.join("results.json");
        let doc = serde_json::json!({
            "sweep": meta,
            "summary": summarize(rows),
            "rows": rows,
        });
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
        written.push(path);
    }

    if plot_data {
        let path = dir.join(format!("plot_{}.csv", meta.axis));
        let mut out = String::from("value,subject,mean_r_over_seeds,min_r,max_r\n");
        for (value, subject, stats) in plot_series(rows) {
            out.push_str(&format!(
                "{value},{subject},{},{},{}\n",
                stats.0, stats.1, stats.2
            ));
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }

    Ok(written)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueSummary {
    pub value: String,
    pub mean_r_over_rows: f64,
    pub n_rows: usize,
    pub n_failed: usize,
}

fn summarize(rows: &[ResultRow]) -> Vec<ValueSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.value.as_str()) {
            order.push(&r.value);
        }
    }
    order
        .into_iter()
        .map(|value| {
            let group: Vec<&ResultRow> = rows.iter().filter(|r| r.value == value).collect();
            let ok: Vec<f64> = group
                .iter()
                .map(|r| r.mean_r)
                .filter(|v| v.is_finite())
                .collect();
            ValueSummary {
                value: value.to_string(),
                mean_r_over_rows: if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().sum::<f64>() / ok.len() as f64
                },
                n_rows: group.len(),
                n_failed: group.len() - ok.len(),
            }
        })
        .collect()
}

/// (value, subject) -> (mean over seeds, min, max) of mean_r.
fn plot_series(rows: &[ResultRow]) -> Vec<(String, String, (f64, f64, f64))> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.value.clone(), r.subject.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(value, subject)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.value == value && r.subject == subject)
                .map(|r| r.mean_r)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (value, subject, (mean, min, max))
        })
        .collect()
}

/// Parse a results CSV back into rows. Inverse of the CSV emitter.
pub fn parse_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "unexpected results header: {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 9 {
                return Err(Error::Parse(format!(
                    "row {i}: expected 9 cells, got {}",
                    cells.len()
                )));
            }
            let f = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {i}: bad float '{s}'")))
            };
            Ok(ResultRow {
                axis: cells[0].to_string(),
                value: cells[1].to_string(),
                subject: cells[2].to_string(),
                seed: cells[3]
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {i}: bad seed")))?,
                mean_r: f(cells[4])?,
                max_r: f(cells[5])?,
                final_loss: f(cells[6])?,
                wall_clock_s: f(cells[7])?,
                fingerprint: cells[8].to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: &str, subject: &str, seed: u64, mean_r: f64) -> ResultRow {
        ResultRow {
            axis: "data_size".into(),
            value: value.into(),
            subject: subject.into(),
            seed,
            mean_r,
            max_r: mean_r + 0.1,
            final_loss: 5.1234567890123,
            wall_clock_s: 12.25,
            fingerprint: "abcd1234abcd1234".into(),
        }
    }

    #[test]
    fn single_row_csv_is_two_lines() {
        let dir = std::env::temp_dir().join("brainenc-report-one");
        let _ = std::fs::remove_dir_all(&dir);
        let rows = vec![row("200", "sub-101", 1, 0.42)];
        let files = emit_report(&rows, &ReportMeta::default(), ReportFormat::Csv, false, &dir)
            .unwrap();
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(CSV_HEADER));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("brainenc-report-rt");
        let _ = std::fs::remove_dir_all(&dir);
        let rows = vec![
            row("200", "sub-101", 1, 0.4217 + 1.0 / 3.0),
            row("800", "sub-101", 2, f64::NAN), // failed cell
            row("800", "sub-102", 2, -0.0123456789012345),
        ];
        let files =
            emit_report(&rows, &ReportMeta::default(), ReportFormat::Both, false, &dir)
                .unwrap();
        let parsed = parse_rows(&files[0]).unwrap();
        assert_eq!(parsed.len(), rows.len());
        for (a, b) in rows.iter().zip(&parsed) {
            assert!(a.eq_exact(b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn json_summary_means_match_hand_average() {
        let dir = std::env::temp_dir().join("brainenc-report-json");
        let _ = std::fs::remove_dir_all(&dir);
        let rows = vec![
            row("200", "sub-101", 1, 0.2),
            row("200", "sub-101", 2, 0.4),
            row("800", "sub-101", 1, 0.5),
        ];
        emit_report(&rows, &ReportMeta::default(), ReportFormat::Json, false, &dir).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("results.json")).unwrap())
                .unwrap();
        let summary = doc["summary"].as_array().unwrap();
        assert_eq!(summary[0]["value"], "200");
        let got = summary[0]["mean_r_over_rows"].as_f64().unwrap();
        assert!((got - 0.3) < 1e-15);
        assert_eq!(summary[1]["mean_r_over_rows"].as_f64().unwrap(), 0.5);
    }

    #[test]
    fn plot_data_spreads_over_seeds() {
        let dir = std::env::temp_dir().join("brainenc-report-plot");
        let _ = std::fs::remove_dir_all(&dir);
        let rows = vec![
            row("200", "sub-101", 1, 0.2),
            row("200", "sub-101", 2, 0.6),
        ];
        let meta = ReportMeta {
            axis: "data_size".into(),
            ..Default::default()
        };
        let files = emit_report(&rows, &meta, ReportFormat::Csv, true, &dir).unwrap();
        let plot = files
            .iter()
            .find(|p| p.file_name().unwrap() == "plot_data_size.csv")
            .unwrap();
        let text = std::fs::read_to_string(plot).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line, "200,sub-101,0.4,0.2,0.6");
    }

    #[test]
    fn empty_rows_are_an_error() {
        let dir = std::env::temp_dir().join("brainenc-report-empty");
        assert!(emit_report(&[], &ReportMeta::default(), ReportFormat::Csv, false, &dir).is_err());
    }
}
