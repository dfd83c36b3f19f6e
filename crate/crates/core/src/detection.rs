//! Sliding-window anomaly detection with boundary localization.
//!
//! A window slides over the series with a small stride; each position gets
//! an anomaly score and is flagged when the score exceeds the calibrated
//! threshold. When a flagged run begins, the anomaly onset must lie in the
//! final `stride` timesteps of the triggering window (the previous, clean
//! position ruled out everything earlier). Shifting the window backwards
//! one step at a time finds the smallest shift that turns it clean again;
//! the timesteps dropped by that shift are exactly the anomalous tail, so
//! the onset falls out of the shift count. The end boundary is refined the
//! same way around the first clean window after the run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imputer::ImputerModel;
use crate::masking::make_sequence_masks;
use crate::scoring::{
    point_scores, residual_sequence_scores, sequence_window_score, trailing_stripe_score,
};
use crate::series::{normalize, slice_windows, AnomalyInterval, Matrix};

/// How a window position is scored during the sequence scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceScoring {
    /// Re-impute the whole window segment by segment and take the DTW
    /// distance to the observation. Sensitive to anomalies anywhere in
    /// the window.
    FullAssembly,
    /// Re-impute only the trailing `stride` timesteps. Cheaper, but only
    /// the newest part of the window contributes to the score.
    TrailingStripe,
}

/// Parameters of a sequence-detection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    /// Window length; must match the model.
    pub window: usize,
    /// Scan stride, and the reach of the boundary refinement.
    pub stride: usize,
    /// Calibrated anomaly threshold.
    pub threshold: f64,
    /// Refine interval boundaries by shift scanning.
    pub localize: bool,
    pub scoring: SequenceScoring,
    /// Segment count for full-assembly scoring.
    pub segments: usize,
}

impl DetectionConfig {
    /// Standard setup: full-assembly scoring with localization; the
    /// segment count matches the window/stride ratio.
    pub fn new(window: usize, stride: usize, threshold: f64) -> Self {
        let segments = if stride == 0 {
            2
        } else {
            (((window as f64) / (stride as f64)).round() as usize).max(2)
        };
        DetectionConfig {
            window,
            stride,
            threshold,
            localize: true,
            scoring: SequenceScoring::FullAssembly,
            segments,
        }
    }

    fn validate(&self, model: &ImputerModel) -> Result<()> {
        if self.window != model.meta.window {
            return Err(Error::DimensionMismatch(format!(
                "detection window {} does not match the model window {}",
                self.window, model.meta.window
            )));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::InvalidArgument(format!(
                "stride {} must be in 1..={}",
                self.stride, self.window
            )));
        }
        if self.scoring == SequenceScoring::TrailingStripe && self.stride >= self.window {
            return Err(Error::InvalidArgument(
                "trailing-stripe scoring needs stride < window".into(),
            ));
        }
        if self.scoring == SequenceScoring::FullAssembly
            && (self.segments < 2 || self.segments > self.window)
        {
            return Err(Error::InvalidArgument(format!(
                "segment count {} must be in 2..={}",
                self.segments, self.window
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// One scored scan position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub start: usize,
    /// Inclusive end of the window.
    pub end: usize,
    pub score: f64,
    pub flagged: bool,
}

/// How one interval's boundaries were refined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationTrace {
    /// Start of the first flagged window of the run.
    pub trigger: usize,
    /// Start of the first clean window after the run, if the series did
    /// not end first.
    pub clean: Option<usize>,
    /// Chosen start-refinement shift, if any shift came back clean.
    pub start_shift: Option<usize>,
    /// Chosen end-refinement shift, if any shift came back flagged.
    pub end_shift: Option<usize>,
    pub interval: AnomalyInterval,
}

/// Point-detection output: per-timestep scores and flagged runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PointDetection {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub intervals: Vec<AnomalyInterval>,
}

impl PointDetection {
    /// Per-timestep 0/1 anomaly labels.
    pub fn flags(&self) -> Vec<u8> {
        self.scores.iter().map(|s| u8::from(*s > self.threshold)).collect()
    }
}

/// Sequence-detection output: the scan trace and the detected intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDetection {
    pub window_scores: Vec<WindowScore>,
    pub threshold: f64,
    pub intervals: Vec<AnomalyInterval>,
    pub traces: Vec<LocalizationTrace>,
    /// Series length the detection ran over.
    pub len: usize,
}

impl SequenceDetection {
    /// Per-timestep 0/1 anomaly labels from the detected intervals.
    pub fn flags(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len];
        for iv in &self.intervals {
            for v in out.iter_mut().take(iv.end + 1).skip(iv.start) {
                *v = 1;
            }
        }
        out
    }
}

/// Maximal runs of set flags as inclusive intervals.
pub fn intervals_from_flags(flags: &[u8]) -> Vec<AnomalyInterval> {
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f != 0, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                out.push(AnomalyInterval::new(s, i - 1).expect("run is non-empty"));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        out.push(AnomalyInterval::new(s, flags.len() - 1).expect("run is non-empty"));
    }
    out
}

/// Merges sorted intervals whose gap is smaller than `min_gap` (overlaps
/// included).
pub fn merge_close_intervals(
    intervals: &[AnomalyInterval],
    min_gap: usize,
) -> Vec<AnomalyInterval> {
    let mut out: Vec<AnomalyInterval> = Vec::new();
    for iv in intervals {
        match out.last_mut() {
            Some(prev) if iv.start <= prev.end + min_gap => {
                prev.end = prev.end.max(iv.end);
            }
            _ => out.push(*iv),
        }
    }
    out
}

/// Highest scan score overlapping each interval (threshold when no scan
/// window overlaps, which only happens for degenerate geometries).
pub fn peak_scores(
    intervals: &[AnomalyInterval],
    window_scores: &[WindowScore],
    threshold: f64,
) -> Vec<f64> {
    intervals
        .iter()
        .map(|iv| {
            window_scores
                .iter()
                .filter(|ws| ws.start <= iv.end && iv.start <= ws.end)
                .map(|ws| ws.score)
                .fold(f64::NEG_INFINITY, f64::max)
                .max(threshold)
        })
        .collect()
}

struct ScanOutcome {
    window_scores: Vec<WindowScore>,
    intervals: Vec<AnomalyInterval>,
    traces: Vec<LocalizationTrace>,
}

/// The scan state machine over an abstract scorer, so the boundary
/// arithmetic can be exercised without a trained model.
fn scan_with_scorer(
    t_len: usize,
    window: usize,
    stride: usize,
    threshold: f64,
    localize: bool,
    score: &mut dyn FnMut(usize) -> Result<f64>,
) -> Result<ScanOutcome> {
    if t_len < window {
        return Err(Error::InvalidArgument(format!(
            "series length {t_len} is shorter than the window {window}"
        )));
    }
    let grid = slice_windows(t_len, window, stride)?;
    let mut ws: Vec<WindowScore> = Vec::with_capacity(grid.len());
    for g in &grid {
        let s = score(g.start)?;
        ws.push(WindowScore {
            start: g.start,
            end: g.start + g.len - 1,
            score: s,
            flagged: s > threshold,
        });
    }
    let mut intervals = Vec::new();
    let mut traces = Vec::new();
    let n = ws.len();
    let mut i = 0;
    while i < n {
        if !ws[i].flagged {
            i += 1;
            continue;
        }
        let trigger = ws[i].start;
        let mut j = i + 1;
        while j < n && ws[j].flagged {
            j += 1;
        }
        let clean = (j < n).then(|| ws[j].start);
        if localize {
            // onset: smallest backward shift that turns the trigger clean;
            // the dropped trailing timesteps held the whole anomaly onset
            let mut start_shift = None;
            let start = if trigger == 0 {
                0
            } else {
                let max_s = stride.min(trigger);
                for s in 1..=max_s {
                    if !(score(trigger - s)? > threshold) {
                        start_shift = Some(s);
                        break;
                    }
                }
                match start_shift {
                    Some(s) => trigger + window - s,
                    None => trigger + window - max_s,
                }
            };
            // offset: smallest backward shift that turns the first clean
            // window flagged again; the re-admitted timesteps reach back
            // exactly to the anomaly end
            let mut end_shift = None;
            let end = match clean {
                None => t_len - 1,
                Some(c) => {
                    let max_s = stride.min(c);
                    for s in 1..=max_s {
                        if score(c - s)? > threshold {
                            end_shift = Some(s);
                            break;
                        }
                    }
                    match end_shift {
                        Some(s) => c - s,
                        None => c.saturating_sub(stride + 1),
                    }
                }
            };
            let start = start.min(t_len - 1);
            let end = end.clamp(start, t_len - 1);
            let interval = AnomalyInterval::new(start, end)?;
            traces.push(LocalizationTrace { trigger, clean, start_shift, end_shift, interval });
            intervals.push(interval);
        } else {
            // coarse fallback: the union of the flagged windows
            let run_end = (ws[j - 1].end).min(t_len - 1);
            intervals.push(AnomalyInterval::new(trigger, run_end)?);
        }
        i = j;
    }
    intervals.sort_by_key(|iv| iv.start);
    let intervals = merge_close_intervals(&intervals, stride);
    Ok(ScanOutcome { window_scores: ws, intervals, traces })
}

/// Point-anomaly detection over a raw series. The series is normalized
/// with the statistics stored in the model; timesteps whose masked
/// reconstruction misses by more than the threshold are flagged.
pub fn detect_points(
    model: &ImputerModel,
    series: &Matrix,
    threshold: f64,
) -> Result<PointDetection> {
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument("threshold must be finite".into()));
    }
    let normalized = normalize(series, &model.stats)?;
    let scores = point_scores(model, &normalized)?;
    let flags: Vec<u8> = scores.iter().map(|s| u8::from(*s > threshold)).collect();
    let intervals = intervals_from_flags(&flags);
    Ok(PointDetection { scores, threshold, intervals })
}

/// Sequence-anomaly detection over a raw series: threshold scan at the
/// configured stride, then boundary refinement per flagged run.
pub fn detect_sequences(
    model: &ImputerModel,
    series: &Matrix,
    cfg: &DetectionConfig,
) -> Result<SequenceDetection> {
    cfg.validate(model)?;
    let normalized = normalize(series, &model.stats)?;
    let t_len = normalized.cols();
    let masks = match cfg.scoring {
        SequenceScoring::FullAssembly => Some(make_sequence_masks(cfg.window, cfg.segments)?),
        SequenceScoring::TrailingStripe => None,
    };
    let mut memo: BTreeMap<usize, f64> = BTreeMap::new();
    let mut scorer = |start: usize| -> Result<f64> {
        if let Some(s) = memo.get(&start) {
            return Ok(*s);
        }
        let win = normalized.slice_cols(start, cfg.window);
        let s = match (&cfg.scoring, &masks) {
            (SequenceScoring::FullAssembly, Some(m)) => sequence_window_score(model, &win, m)?,
            (SequenceScoring::TrailingStripe, _) => {
                trailing_stripe_score(model, &win, cfg.stride)?
            }
            _ => unreachable!(),
        };
        memo.insert(start, s);
        Ok(s)
    };
    let outcome = scan_with_scorer(
        t_len,
        cfg.window,
        cfg.stride,
        cfg.threshold,
        cfg.localize,
        &mut scorer,
    )?;
    Ok(SequenceDetection {
        window_scores: outcome.window_scores,
        threshold: cfg.threshold,
        intervals: outcome.intervals,
        traces: outcome.traces,
        len: t_len,
    })
}

/// Residual-only sequence detection: per-timestep residuals from the full
/// re-imputation, thresholded directly with no warping and no boundary
/// refinement.
pub fn detect_by_residuals(
    model: &ImputerModel,
    series: &Matrix,
    threshold: f64,
    segments: usize,
) -> Result<PointDetection> {
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument("threshold must be finite".into()));
    }
    let normalized = normalize(series, &model.stats)?;
    let masks = make_sequence_masks(model.meta.window, segments)?;
    let scores = residual_sequence_scores(model, &normalized, &masks)?;
    let flags: Vec<u8> = scores.iter().map(|s| u8::from(*s > threshold)).collect();
    let intervals = intervals_from_flags(&flags);
    Ok(PointDetection { scores, threshold, intervals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imputer::HeadKind;

    /// Ideal scorer: the number of anomalous timesteps the window overlaps.
    fn overlap_scorer(anomalies: Vec<AnomalyInterval>, window: usize) ->
        impl FnMut(usize) -> Result<f64>
    {
        move |start: usize| {
            let end = start + window - 1;
            let overlap: usize = anomalies
                .iter()
                .map(|iv| {
                    let lo = iv.start.max(start);
                    let hi = iv.end.min(end);
                    hi.saturating_sub(lo) + usize::from(hi >= lo)
                })
                .sum();
            Ok(overlap as f64)
        }
    }

    fn run_scan(
        t_len: usize,
        window: usize,
        stride: usize,
        localize: bool,
        planted: &[(usize, usize)],
    ) -> ScanOutcome {
        let ivs: Vec<AnomalyInterval> = planted
            .iter()
            .map(|&(s, e)| AnomalyInterval::new(s, e).unwrap())
            .collect();
        let mut scorer = overlap_scorer(ivs, window);
        scan_with_scorer(t_len, window, stride, 0.5, localize, &mut scorer).unwrap()
    }

    #[test]
    fn ideal_scorer_recovers_exact_boundaries_mid_series() {
        let out = run_scan(200, 16, 4, true, &[(100, 140)]);
        assert_eq!(out.intervals.len(), 1);
        assert_eq!((out.intervals[0].start, out.intervals[0].end), (100, 140));
    }

    #[test]
    fn ideal_scorer_recovers_an_anomaly_at_the_series_head() {
        // trigger at the very first window: its start is the best estimate
        let out = run_scan(120, 16, 4, true, &[(0, 20)]);
        assert_eq!(out.intervals.len(), 1);
        assert_eq!((out.intervals[0].start, out.intervals[0].end), (0, 20));
        assert_eq!(out.traces[0].trigger, 0);
    }

    #[test]
    fn anomaly_running_to_the_series_end_closes_at_the_last_timestep() {
        let out = run_scan(160, 16, 4, true, &[(130, 159)]);
        assert_eq!(out.intervals.len(), 1);
        assert_eq!((out.intervals[0].start, out.intervals[0].end), (130, 159));
        assert!(out.traces[0].clean.is_none());
    }

    #[test]
    fn two_separated_anomalies_come_back_as_two_exact_intervals() {
        let out = run_scan(220, 16, 4, true, &[(40, 52), (120, 150)]);
        let got: Vec<(usize, usize)> =
            out.intervals.iter().map(|iv| (iv.start, iv.end)).collect();
        assert_eq!(got, vec![(40, 52), (120, 150)]);
    }

    #[test]
    fn short_blip_is_still_found_with_tight_bounds() {
        // a 3-step anomaly, shorter than the stride
        let out = run_scan(200, 16, 4, true, &[(97, 99)]);
        assert_eq!(out.intervals.len(), 1);
        let iv = out.intervals[0];
        assert!(iv.start <= 97 && iv.end >= 99, "got [{}, {}]", iv.start, iv.end);
        assert!(iv.len() <= 3 + 2 * 4, "interval [{}, {}] too loose", iv.start, iv.end);
    }

    #[test]
    fn without_localization_whole_windows_are_flagged() {
        let out = run_scan(200, 16, 4, false, &[(100, 140)]);
        assert_eq!(out.intervals.len(), 1);
        // union of flagged windows: first flagged start 88, last flagged
        // window [140, 155]
        assert_eq!((out.intervals[0].start, out.intervals[0].end), (88, 155));
    }

    #[test]
    fn localization_tightens_the_coarse_intervals() {
        let coarse = run_scan(200, 16, 4, false, &[(100, 140)]);
        let fine = run_scan(200, 16, 4, true, &[(100, 140)]);
        assert!(fine.intervals[0].len() < coarse.intervals[0].len());
        assert!(coarse.intervals[0].start <= fine.intervals[0].start);
        assert!(coarse.intervals[0].end >= fine.intervals[0].end);
    }

    #[test]
    fn flag_runs_become_intervals() {
        let flags = [0u8, 1, 1, 0, 0, 1, 0, 1];
        let ivs = intervals_from_flags(&flags);
        let got: Vec<(usize, usize)> = ivs.iter().map(|iv| (iv.start, iv.end)).collect();
        assert_eq!(got, vec![(1, 2), (5, 5), (7, 7)]);
        assert!(intervals_from_flags(&[0, 0]).is_empty());
    }

    #[test]
    fn close_intervals_merge_distant_ones_do_not() {
        let ivs = vec![
            AnomalyInterval::new(0, 5).unwrap(),
            AnomalyInterval::new(8, 10).unwrap(),
            AnomalyInterval::new(30, 35).unwrap(),
        ];
        let merged = merge_close_intervals(&ivs, 4);
        let got: Vec<(usize, usize)> = merged.iter().map(|iv| (iv.start, iv.end)).collect();
        assert_eq!(got, vec![(0, 10), (30, 35)]);
    }

    #[test]
    fn identity_model_flags_the_loud_column() {
        // zeroed model scores each timestep by its column norm, so a simple
        // threshold picks out the one large column
        let model = ImputerModel::zeroed(1, 4, 1, 3, 1, HeadKind::Reconstruction).unwrap();
        let mut series = Matrix::zeros(1, 8);
        for v in series.data_mut() {
            *v = 0.1;
        }
        series.set(0, 5, 5.0);
        let det = detect_points(&model, &series, 1.0).unwrap();
        let got: Vec<(usize, usize)> =
            det.intervals.iter().map(|iv| (iv.start, iv.end)).collect();
        assert_eq!(got, vec![(5, 5)]);
        assert_eq!(det.flags()[5], 1);
        assert_eq!(det.flags().iter().map(|f| *f as usize).sum::<usize>(), 1);
    }

    #[test]
    fn identity_sequence_model_saturates_or_stays_silent() {
        // zero forecasts give every window the same score (DTW against the
        // zero matrix); the threshold decides all-or-nothing
        let model = ImputerModel::zeroed(1, 4, 1, 3, 1, HeadKind::BidirectionalForecast).unwrap();
        let mut series = Matrix::zeros(1, 12);
        for v in series.data_mut() {
            *v = 1.0;
        }
        // every window scores DTW([1,1,1,1], [0,0,0,0]) = 4
        let mut cfg = DetectionConfig::new(4, 2, 5.0);
        cfg.segments = 2;
        let silent = detect_sequences(&model, &series, &cfg).unwrap();
        assert!(silent.intervals.is_empty());
        assert!(silent.window_scores.iter().all(|w| (w.score - 4.0).abs() < 1e-12));
        cfg.threshold = 3.0;
        let loud = detect_sequences(&model, &series, &cfg).unwrap();
        assert_eq!(loud.intervals.len(), 1);
        assert_eq!((loud.intervals[0].start, loud.intervals[0].end), (0, 11));
        assert_eq!(loud.flags(), vec![1u8; 12]);
    }

    #[test]
    fn config_validation_catches_bad_setups() {
        let model = ImputerModel::zeroed(1, 8, 1, 3, 1, HeadKind::BidirectionalForecast).unwrap();
        let series = Matrix::zeros(1, 20);
        let mut cfg = DetectionConfig::new(4, 2, 1.0); // wrong window
        assert!(detect_sequences(&model, &series, &cfg).is_err());
        cfg = DetectionConfig::new(8, 0, 1.0);
        assert!(detect_sequences(&model, &series, &cfg).is_err());
        cfg = DetectionConfig::new(8, 2, f64::NAN);
        assert!(detect_sequences(&model, &series, &cfg).is_err());
        cfg = DetectionConfig::new(8, 8, 1.0);
        cfg.scoring = SequenceScoring::TrailingStripe;
        assert!(detect_sequences(&model, &series, &cfg).is_err());
    }

    #[test]
    fn residual_only_path_flags_the_loud_column() {
        let model = ImputerModel::zeroed(1, 4, 1, 3, 1, HeadKind::BidirectionalForecast).unwrap();
        let mut series = Matrix::zeros(1, 8);
        for v in series.data_mut() {
            *v = 0.1;
        }
        series.set(0, 6, 4.0);
        let det = detect_by_residuals(&model, &series, 1.0, 2).unwrap();
        let got: Vec<(usize, usize)> =
            det.intervals.iter().map(|iv| (iv.start, iv.end)).collect();
        assert_eq!(got, vec![(6, 6)]);
    }

    #[test]
    fn peak_scores_track_the_overlapping_windows() {
        let ws = vec![
            WindowScore { start: 0, end: 7, score: 1.0, flagged: false },
            WindowScore { start: 4, end: 11, score: 6.0, flagged: true },
            WindowScore { start: 8, end: 15, score: 3.0, flagged: true },
        ];
        let ivs = vec![AnomalyInterval::new(9, 10).unwrap()];
        assert_eq!(peak_scores(&ivs, &ws, 0.5), vec![6.0]);
    }
}
