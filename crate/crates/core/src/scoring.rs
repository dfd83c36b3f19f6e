//! Anomaly scores and threshold calibration.
//!
//! Point scores: within each window, one timestep column at a time is
//! masked and reconstructed; the score of that timestep is the L1 distance
//! between reconstruction and observation across variates. Sequence scores:
//! a whole window is re-imputed segment by segment and compared to the
//! observation with dynamic time warping, which stays small under slight
//! temporal misalignment of an otherwise faithful reconstruction.
//!
//! Thresholds are calibrated as the maximum score seen on held-out
//! anomaly-free validation data: the tightest bound that still accepts
//! everything normal.

use crate::error::{Error, Result};
use crate::imputer::{HeadKind, HeadParams, ImputerModel};
use crate::masking::SequenceMaskSet;
use crate::series::{slice_windows, Matrix};
use crate::tape::Tape;
use crate::training::{build_segment_imputation_values, build_sequence_assembly_values};

/// Per-timestep residual scores: `e[t] = sum_v |xhat[v][t] - x[v][t]|`.
pub fn residual_scores(x: &Matrix, xhat: &Matrix) -> Result<Vec<f64>> {
    if x.rows() != xhat.rows() || x.cols() != xhat.cols() {
        return Err(Error::DimensionMismatch(format!(
            "residual operands {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            xhat.rows(),
            xhat.cols()
        )));
    }
    if x.cols() == 0 {
        return Err(Error::EmptyInput("empty residual operands"));
    }
    Ok((0..x.cols())
        .map(|t| (0..x.rows()).map(|v| (xhat.get(v, t) - x.get(v, t)).abs()).sum())
        .collect())
}

/// Dynamic time warping distance with the per-timestep L1 ground cost,
/// allowing diagonal, vertical and horizontal steps.
///
/// For a = [0, 1, 2] and b = [0, 2] the best path aligns 0-0, 1-2, 2-2
/// for a total cost of 1.
pub fn dtw_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::DimensionMismatch(format!(
            "dtw operands have {} vs {} variates",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() == 0 || b.cols() == 0 {
        return Err(Error::EmptyInput("empty dtw operand"));
    }
    let (n, m, d) = (a.cols(), b.cols(), a.rows());
    let cost = |i: usize, j: usize| -> f64 {
        (0..d).map(|v| (a.get(v, i) - b.get(v, j)).abs()).sum()
    };
    // rolling single-row DP over the (n x m) alignment grid
    let mut prev = vec![0.0f64; m];
    let mut curr = vec![0.0f64; m];
    for j in 0..m {
        prev[j] = cost(0, j) + if j > 0 { prev[j - 1] } else { 0.0 };
    }
    for i in 1..n {
        curr[0] = cost(i, 0) + prev[0];
        for j in 1..m {
            let best = prev[j].min(curr[j - 1]).min(prev[j - 1]);
            curr[j] = cost(i, j) + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m - 1])
}

/// Point scores for selected columns of one window: each listed timestep
/// column is masked in turn (the sentinel zero in normalized space) and
/// reconstructed from the rest.
pub(crate) fn window_point_scores_at(
    model: &ImputerModel,
    window: &Matrix,
    cols: &[usize],
) -> Result<Vec<f64>> {
    let HeadParams::Reconstruction(core) = &model.head else {
        return Err(Error::HeadMismatch {
            expected: HeadKind::Reconstruction.to_string(),
            found: model.head_kind().to_string(),
        });
    };
    let (d, w) = (model.meta.d, model.meta.window);
    if window.rows() != d || window.cols() != w {
        return Err(Error::DimensionMismatch(format!(
            "expected {}x{} window, found {}x{}",
            d,
            w,
            window.rows(),
            window.cols()
        )));
    }
    let mut tape = Tape::new();
    let bound = core.bind(&mut tape);
    let w_in = tape.input(window.clone());
    let mut scores = Vec::with_capacity(cols.len());
    for &i in cols {
        let mut keep = Matrix::zeros(d, w);
        for v in keep.data_mut() {
            *v = 1.0;
        }
        for v in 0..d {
            keep.set(v, i, 0.0);
        }
        let keep_in = tape.input(keep);
        let masked = tape.mul(w_in, keep_in);
        let recon = crate::imputer::build_recon_window(&mut tape, masked, &bound, &model.meta);
        let r = tape.val(recon);
        scores.push((0..d).map(|v| (r.get(v, i) - window.get(v, i)).abs()).sum());
    }
    Ok(scores)
}

/// Per-timestep point scores over a whole normalized series. Windows
/// slide with stride ω/4 and every timestep is scored from the window
/// that holds it closest to the center, so each imputation keeps
/// two-sided context wherever the series permits.
pub fn point_scores(model: &ImputerModel, series: &Matrix) -> Result<Vec<f64>> {
    let w = model.meta.window;
    let t_len = series.cols();
    if t_len < w {
        return Err(Error::InvalidArgument(format!(
            "series length {} is shorter than the model window {}",
            t_len, w
        )));
    }
    let stride = (w / 4).max(1);
    let wins = slice_windows(t_len, w, stride)?;
    // most-centered window per column (distance doubled to stay integral)
    let mut best = vec![(usize::MAX, usize::MAX); t_len];
    for (k, ws) in wins.iter().enumerate() {
        let center2 = 2 * ws.start + ws.len - 1;
        for t in ws.start..ws.start + ws.len {
            let dist = (2 * t).abs_diff(center2);
            if dist < best[t].0 {
                best[t] = (dist, k);
            }
        }
    }
    let mut scores = vec![0.0f64; t_len];
    for (k, ws) in wins.iter().enumerate() {
        let cols: Vec<usize> = (0..ws.len).filter(|&j| best[ws.start + j].1 == k).collect();
        if cols.is_empty() {
            continue;
        }
        let win = series.slice_cols(ws.start, ws.len);
        let s = window_point_scores_at(model, &win, &cols)?;
        for (j, v) in cols.into_iter().zip(s) {
            scores[ws.start + j] = v;
        }
    }
    Ok(scores)
}

/// Fully re-imputed version of a window under the segment partition.
pub fn assemble_sequence_window(
    model: &ImputerModel,
    window: &Matrix,
    masks: &SequenceMaskSet,
) -> Result<Matrix> {
    build_sequence_assembly_values(model, window, masks)
}

/// Window-level sequence score: DTW between the window and its full
/// segment-by-segment re-imputation.
pub fn sequence_window_score(
    model: &ImputerModel,
    window: &Matrix,
    masks: &SequenceMaskSet,
) -> Result<f64> {
    let xhat = assemble_sequence_window(model, window, masks)?;
    dtw_distance(window, &xhat)
}

/// Cheaper window score: only the trailing `stripe` timesteps are
/// re-imputed (forward forecast; there is no right context), the rest of
/// the reconstruction is the observation itself.
pub fn trailing_stripe_score(
    model: &ImputerModel,
    window: &Matrix,
    stripe: usize,
) -> Result<f64> {
    let w = model.meta.window;
    if stripe == 0 || stripe >= w {
        return Err(Error::InvalidArgument(format!(
            "stripe length {stripe} must be in 1..{w}"
        )));
    }
    let seg = build_segment_imputation_values(model, window, w - stripe, w - 1)?;
    let mut xhat = window.clone();
    for v in 0..model.meta.d {
        for j in 0..stripe {
            xhat.set(v, w - stripe + j, seg.get(v, j));
        }
    }
    dtw_distance(window, &xhat)
}

/// The largest finite score wins; anomaly flags later compare against it.
pub fn threshold_from_scores(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to calibrate on"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score during calibration".into()));
    }
    Ok(scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Per-timestep residual scores under the sequence model: each window
/// (stride = window, first-computed wins on the tail overlap) is fully
/// re-imputed and the per-timestep L1 residual is recorded. This is the
/// plain-residual alternative to warped window scores.
pub fn residual_sequence_scores(
    model: &ImputerModel,
    series: &Matrix,
    masks: &SequenceMaskSet,
) -> Result<Vec<f64>> {
    let w = model.meta.window;
    if series.cols() < w {
        return Err(Error::InvalidArgument(format!(
            "series length {} is shorter than the model window {}",
            series.cols(),
            w
        )));
    }
    let mut scores: Vec<Option<f64>> = vec![None; series.cols()];
    for ws in slice_windows(series.cols(), w, w)? {
        let win = series.slice_cols(ws.start, ws.len);
        let xhat = assemble_sequence_window(model, &win, masks)?;
        for (j, v) in residual_scores(&win, &xhat)?.into_iter().enumerate() {
            let slot = &mut scores[ws.start + j];
            if slot.is_none() {
                *slot = Some(v);
            }
        }
    }
    Ok(scores.into_iter().map(|s| s.expect("windows cover the series")).collect())
}

/// Residual threshold for the sequence model: maximum per-timestep
/// residual over all validation tails.
pub fn calibrate_residual_threshold(
    model: &ImputerModel,
    validation: &[Matrix],
    masks: &SequenceMaskSet,
) -> Result<f64> {
    let mut all = Vec::new();
    for v in validation {
        all.extend(residual_sequence_scores(model, v, masks)?);
    }
    threshold_from_scores(&all)
}

/// Point threshold: maximum per-timestep score over all validation tails.
pub fn calibrate_point_threshold(
    model: &ImputerModel,
    validation: &[Matrix],
) -> Result<f64> {
    let mut all = Vec::new();
    for v in validation {
        all.extend(point_scores(model, v)?);
    }
    threshold_from_scores(&all)
}

/// Sequence threshold: maximum window score over all validation tails.
/// `stride` should match the detector's scan stride so calibration sees
/// windows at the same phase offsets the scan will produce.
pub fn calibrate_sequence_threshold(
    model: &ImputerModel,
    validation: &[Matrix],
    masks: &SequenceMaskSet,
    stride: usize,
) -> Result<f64> {
    let w = model.meta.window;
    if stride == 0 || stride > w {
        return Err(Error::InvalidArgument(format!(
            "calibration stride {stride} must lie in 1..={w}"
        )));
    }
    let mut all = Vec::new();
    for v in validation {
        if v.cols() < w {
            return Err(Error::InvalidArgument(format!(
                "validation span {} is shorter than the model window {}",
                v.cols(),
                w
            )));
        }
        for ws in slice_windows(v.cols(), w, stride)? {
            all.push(sequence_window_score(model, &v.slice_cols(ws.start, ws.len), masks)?);
        }
    }
    threshold_from_scores(&all)
}
