//! Activation extraction over clip windows and TR alignment with
//! hemodynamic delay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::PriorModel;
use crate::synthdata::FrameStream;
use crate::vqvae::{stack_clips, CodeGrid, VqvaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reducer {
    /// Keep all grid positions: p = T'*H'*W'*width.
    Flatten,
    /// Mean over (t,h,w): p = width.
    MeanPool,
}

impl Reducer {
    pub fn parse(s: &str) -> Result<Reducer> {
        match s {
            "flatten" => Ok(Reducer::Flatten),
            "mean-pool" | "pool" => Ok(Reducer::MeanPool),
            other => Err(Error::InvalidConfig(format!(
                "reducer must be 'flatten' or 'mean-pool', got '{other}'"
            ))),
        }
    }
}

/// One feature vector per 16-frame window.
#[derive(Debug, Clone)]
pub struct WindowFeature {
    pub center_time: f64,
    pub values: Vec<f64>,
}

/// Frozen per-window stage-1 outputs for a stream: discrete codes plus the
/// encoder feature grid that conditions the following window. Computed once
/// and shared across every extraction over the same stream. Contexts are
/// held at f32 to keep large corpora in memory.
pub struct StreamCodes {
    pub codes: Vec<CodeGrid>,
    /// Flattened `[S * n_hiddens]` hidden features per window.
    pub contexts: Vec<Vec<f32>>,
    pub center_times: Vec<f64>,
}

impl StreamCodes {
    /// Conditioning features for window `k` (the previous window's encoder
    /// grid), widened back to f64; `None` at a stream start.
    pub fn context_for(&self, k: usize) -> Option<Vec<f64>> {
        if k == 0 {
            None
        } else {
            Some(self.contexts[k - 1].iter().map(|&v| v as f64).collect())
        }
    }
}

pub fn prepare_stream(vqvae: &VqvaeModel, stream: &FrameStream) -> Result<StreamCodes> {
    let n = stream.n_windows();
    if n == 0 {
        return Err(Error::Empty("stream shorter than one window".into()));
    }
    let mut codes = Vec::with_capacity(n);
    let mut contexts = Vec::with_capacity(n);
    let mut center_times = Vec::with_capacity(n);
    for start in (0..n).step_by(8) {
        let end = (start + 8).min(n);
        let clips: Vec<_> = (start..end)
            .map(|k| stream.clip(k))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&_> = clips.iter().collect();
        let batch = stack_clips(&refs)?;
        let (hidden, z_e) = vqvae.encode(&batch)?;
        let q = vqvae.codebook.quantize(&z_e)?;
        let per = hidden.len() / clips.len();
        for (i, clip) in clips.iter().enumerate() {
            codes.push(q.codes[i].clone());
            contexts.push(
                hidden.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| v as f32)
                    .collect(),
            );
            center_times.push(clip.center_time());
        }
    }
    Ok(StreamCodes {
        codes,
        contexts,
        center_times,
    })
}

/// Tap one activation per window, window k conditioned on window k-1 (null
/// context for the first), and reduce to a feature vector.
pub fn extract_features_from(
    prior: &PriorModel,
    stream_codes: &StreamCodes,
    tap: &str,
    reducer: Reducer,
) -> Result<Vec<WindowFeature>> {
    let n = stream_codes.codes.len();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(8) {
        let end = (start + 8).min(n);
        let codes = &stream_codes.codes[start..end];
        let widened: Vec<Option<Vec<f64>>> =
            (start..end).map(|k| stream_codes.context_for(k)).collect();
        let entries: Vec<Option<&[f64]>> =
            widened.iter().map(|o| o.as_deref()).collect();
        let ctx = prior.build_context(&entries)?;
        let tap_out = prior.tap_activation(tap, codes, &ctx)?;
        let b = end - start;
        let per = tap_out.len() / b;
        let width = *tap_out.shape().last().unwrap();
        let cells = per / width;
        for i in 0..b {
            let chunk = &tap_out.data()[i * per..(i + 1) * per];
            let values = match reducer {
                Reducer::Flatten => chunk.to_vec(),
                Reducer::MeanPool => {
                    let mut pooled = vec![0.0; width];
                    for cell in 0..cells {
                        for j in 0..width {
                            pooled[j] += chunk[cell * width + j];
                        }
                    }
                    for v in &mut pooled {
                        *v /= cells as f64;
                    }
                    pooled
                }
            };
            out.push(WindowFeature {
                center_time: stream_codes.center_times[start + i],
                values,
            });
        }
    }
    Ok(out)
}

/// Full extraction pipeline from raw frames.
pub fn extract_features(
    prior: &PriorModel,
    stream: &FrameStream,
    tap: &str,
    reducer: Reducer,
) -> Result<Vec<WindowFeature>> {
    let codes = prepare_stream(&prior.vqvae, stream)?;
    extract_features_from(prior, &codes, tap, reducer)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tap: String,
    pub reducer: Reducer,
    pub delay_trs: usize,
    pub tr_seconds: f64,
}

/// TR-aligned, delay-shifted stimulus features. `tr_indices[r]` is the TR
/// index row `r` predicts, so targets can be subset in lockstep.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub x: Vec<f64>,
    pub rows: usize,
    pub p: usize,
    pub tr_indices: Vec<usize>,
    pub provenance: Provenance,
}

impl FeatureMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.p..(r + 1) * self.p]
    }
}

/// Average window features into TR bins by center timestamp, then shift by
/// the hemodynamic delay: row for TR `k` carries the bin at `k - delay`.
/// TRs whose source bin is empty (including the first `delay_trs`) are
/// dropped; `tr_indices` records what survived.
pub fn align_to_tr(
    features: &[WindowFeature],
    tr_seconds: f64,
    delay_trs: usize,
    provenance: Provenance,
) -> Result<FeatureMatrix> {
    if tr_seconds <= 0.0 {
        return Err(Error::InvalidConfig("tr_seconds must be positive".into()));
    }
    if features.is_empty() {
        return Err(Error::Empty("no window features to align".into()));
    }
    let p = features[0].values.len();
    let max_bin = features
        .iter()
        .map(|f| (f.center_time / tr_seconds).floor() as usize)
        .max()
        .unwrap();
    let n_bins = max_bin + 1;
    let mut sums = vec![0.0; n_bins * p];
    let mut counts = vec![0usize; n_bins];
    for f in features {
        if f.values.len() != p {
            return Err(Error::ShapeMismatch("feature widths differ".into()));
        }
        let bin = (f.center_time / tr_seconds).floor() as usize;
        counts[bin] += 1;
        for (a, v) in sums[bin * p..(bin + 1) * p].iter_mut().zip(&f.values) {
            *a += v;
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Empty("no window overlaps any TR".into()));
    }
    let mut x = Vec::new();
    let mut tr_indices = Vec::new();
    for tr in delay_trs..n_bins + delay_trs {
        let src = tr - delay_trs;
        if src >= n_bins || counts[src] == 0 {
            continue;
        }
        tr_indices.push(tr);
        x.extend(
            sums[src * p..(src + 1) * p]
                .iter()
                .map(|v| v / counts[src] as f64),
        );
    }
    let rows = tr_indices.len();
    let fm = FeatureMatrix {
        x,
        rows,
        p,
        tr_indices,
        provenance,
    };
    if fm.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite feature values".into()));
    }
    Ok(fm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov(delay: usize, tr: f64) -> Provenance {
        Provenance {
            tap: "test".into(),
            reducer: Reducer::MeanPool,
            delay_trs: delay,
            tr_seconds: tr,
        }
    }

    fn window(t: f64, v: f64) -> WindowFeature {
        WindowFeature {
            center_time: t,
            values: vec![v, 2.0 * v],
        }
    }

    #[test]
    fn identity_alignment_with_one_window_per_tr() {
        let feats: Vec<WindowFeature> =
            (0..5).map(|k| window(k as f64 + 0.5, k as f64)).collect();
        let fm = align_to_tr(&feats, 1.0, 0, prov(0, 1.0)).unwrap();
        assert_eq!(fm.rows, 5);
        assert_eq!(fm.tr_indices, vec![0, 1, 2, 3, 4]);
        for k in 0..5 {
            assert_eq!(fm.row(k), &[k as f64, 2.0 * k as f64]);
        }
    }

    #[test]
    fn delay_shift_moves_features_forward() {
        let feats: Vec<WindowFeature> =
            (0..6).map(|k| window(k as f64 * 1.49 + 0.7, k as f64)).collect();
        let fm = align_to_tr(&feats, 1.49, 3, prov(3, 1.49)).unwrap();
        // Row for TR k carries features from TR k-3, i.e. ~4.47 s earlier.
        assert_eq!(fm.tr_indices[0], 3);
        assert_eq!(fm.row(0)[0], 0.0);
        assert_eq!(fm.row(3)[0], 3.0);
    }

    #[test]
    fn multiple_windows_average_within_a_tr() {
        let feats = vec![window(0.1, 1.0), window(0.6, 3.0), window(1.2, 5.0)];
        let fm = align_to_tr(&feats, 1.0, 0, prov(0, 1.0)).unwrap();
        assert_eq!(fm.rows, 2);
        assert_eq!(fm.row(0), &[2.0, 4.0]);
        assert_eq!(fm.row(1), &[5.0, 10.0]);
    }

    #[test]
    fn empty_bins_are_dropped_in_lockstep() {
        // Windows land in TR 0 and TR 2 only.
        let feats = vec![window(0.5, 1.0), window(2.5, 7.0)];
        let fm = align_to_tr(&feats, 1.0, 1, prov(1, 1.0)).unwrap();
        assert_eq!(fm.tr_indices, vec![1, 3]);
        assert_eq!(fm.row(0), &[1.0, 2.0]);
        assert_eq!(fm.row(1), &[7.0, 14.0]);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(align_to_tr(&[], 1.0, 0, prov(0, 1.0)).is_err());
        assert!(align_to_tr(&[window(0.5, 1.0)], 0.0, 0, prov(0, 1.0)).is_err());
    }
}
