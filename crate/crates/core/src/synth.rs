//! Synthetic series with planted, labeled anomalies.
//!
//! The generator builds a smooth base signal per variate, adds Gaussian
//! noise, then plants anomalies only inside a configurable zone of the
//! series (so the rest stays clean for training). Sequence anomalies are
//! placed slot-wise: the zone is divided into one equal slot per anomaly
//! and the anomaly lands at a random offset inside its slot, which makes
//! the minimum-separation guarantee checkable up front instead of relying
//! on rejection sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{AnomalyInterval, Matrix, TimeSeries};

/// Underlying clean waveform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseSignal {
    /// `amplitude * sin(2*pi*t/period + phase_v)`, one phase per variate.
    Sine { period: f64, amplitude: f64 },
    /// Linear trend `slope * t`, offset per variate.
    Ramp { slope: f64 },
    /// Two incommensurate sines plus a slow drift.
    Composite { period: f64, amplitude: f64 },
}

/// Shapes a planted sequence anomaly can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceAnomalyKind {
    /// The signal freezes at its entry value (stuck sensor).
    Flatline,
    /// The oscillation triples its frequency.
    FrequencyShift,
    /// The signal jumps by a constant offset.
    LevelShift,
}

/// Full description of a synthetic series. Deserializes with defaults, so
/// a JSON spec only needs the fields it wants to override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub id: String,
    pub length: usize,
    pub variates: usize,
    pub base: BaseSignal,
    pub noise_std: f64,
    /// Number of single-timestep spikes (each hits one variate).
    pub point_count: usize,
    /// Absolute spike height added on top of the signal.
    pub point_magnitude: f64,
    /// Number of sequence anomalies (each hits all variates).
    pub seq_count: usize,
    /// Inclusive length range for sequence anomalies.
    pub seq_len: (usize, usize),
    /// Anomaly shapes, used round-robin.
    pub seq_kinds: Vec<SequenceAnomalyKind>,
    /// Offset magnitude for level shifts.
    pub seq_magnitude: f64,
    /// Fraction range of the series where anomalies may be planted.
    pub anomaly_zone: (f64, f64),
    /// Minimum clean gap between planted anomalies.
    pub min_separation: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            id: "synthetic".into(),
            length: 2048,
            variates: 2,
            base: BaseSignal::Sine { period: 64.0, amplitude: 1.0 },
            noise_std: 0.1,
            point_count: 0,
            point_magnitude: 0.6,
            seq_count: 0,
            seq_len: (20, 60),
            seq_kinds: vec![
                SequenceAnomalyKind::Flatline,
                SequenceAnomalyKind::FrequencyShift,
                SequenceAnomalyKind::LevelShift,
            ],
            seq_magnitude: 1.0,
            anomaly_zone: (0.6, 1.0),
            min_separation: 96,
            seed: 42,
        }
    }
}

/// Generated series plus the exact ground truth that went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub series: TimeSeries,
    /// Sequence anomalies, sorted by start.
    pub intervals: Vec<AnomalyInterval>,
    /// Point anomalies as (variate, timestep), sorted by timestep.
    pub points: Vec<(usize, usize)>,
}

fn base_value(base: &BaseSignal, v: usize, t: usize, freq_mult: f64) -> f64 {
    let tf = t as f64;
    let phase = v as f64 * 0.7;
    match *base {
        BaseSignal::Sine { period, amplitude } => {
            amplitude * (2.0 * std::f64::consts::PI * freq_mult * tf / period + phase).sin()
        }
        BaseSignal::Ramp { slope } => slope * tf + v as f64 * 0.5,
        BaseSignal::Composite { period, amplitude } => {
            let w = 2.0 * std::f64::consts::PI * freq_mult * tf;
            amplitude * (w / period + phase).sin()
                + 0.4 * amplitude * (w / (period / 3.7) + 1.3 * phase).sin()
                + 0.001 * amplitude * tf
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.length == 0 || self.variates == 0 {
            return Err(Error::InvalidArgument(
                "length and variate count must be positive".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument("noise std must be finite and >= 0".into()));
        }
        let (z0, z1) = self.anomaly_zone;
        if !(0.0..=1.0).contains(&z0) || !(0.0..=1.0).contains(&z1) || z0 >= z1 {
            return Err(Error::InvalidArgument(
                "anomaly zone must satisfy 0 <= lo < hi <= 1".into(),
            ));
        }
        if self.seq_count > 0 {
            if self.seq_kinds.is_empty() {
                return Err(Error::InvalidArgument(
                    "sequence anomalies requested but no kinds given".into(),
                ));
            }
            if self.seq_len.0 == 0 || self.seq_len.0 > self.seq_len.1 {
                return Err(Error::InvalidArgument(
                    "sequence length range must satisfy 1 <= lo <= hi".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Generates the series, its 0/1 labels, and the planted ground truth.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSeries> {
    spec.validate()?;
    let (t_len, d) = (spec.length, spec.variates);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Matrix::zeros(d, t_len);
    for v in 0..d {
        for t in 0..t_len {
            values.set(v, t, base_value(&spec.base, v, t, 1.0));
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("positive std");
        for x in values.data_mut() {
            *x += noise.sample(&mut rng);
        }
    }

    let zone_lo = (spec.anomaly_zone.0 * t_len as f64).floor() as usize;
    let zone_hi = (spec.anomaly_zone.1 * t_len as f64).floor() as usize;
    let zone_hi = zone_hi.min(t_len);
    let mut labels = vec![0u8; t_len];

    // sequence anomalies: one slot per anomaly inside the zone
    let mut intervals = Vec::with_capacity(spec.seq_count);
    if spec.seq_count > 0 {
        let zone_len = zone_hi.saturating_sub(zone_lo);
        let slot = zone_len / spec.seq_count;
        let needed = spec.seq_len.1 + spec.min_separation;
        if slot < needed {
            return Err(Error::InvalidArgument(format!(
                "anomaly zone too small: slots of {slot} steps cannot fit anomalies up to \
                 {} steps plus {} separation",
                spec.seq_len.1, spec.min_separation
            )));
        }
        for k in 0..spec.seq_count {
            let len = rng.gen_range(spec.seq_len.0..=spec.seq_len.1);
            let slot_lo = zone_lo + k * slot;
            // keep `min_separation` free at the slot tail
            let max_off = slot - spec.min_separation - len;
            let off = if max_off == 0 { 0 } else { rng.gen_range(0..=max_off) };
            let start = slot_lo + off;
            let end = start + len - 1;
            let kind = spec.seq_kinds[k % spec.seq_kinds.len()];
            apply_sequence_anomaly(&mut values, spec, kind, start, end);
            for l in labels[start..=end].iter_mut() {
                *l = 1;
            }
            intervals.push(AnomalyInterval::new(start, end)?);
        }
    }

    // point anomalies in the same zone, clear of the sequence intervals
    let mut points = Vec::with_capacity(spec.point_count);
    if spec.point_count > 0 {
        if zone_hi <= zone_lo {
            return Err(Error::InvalidArgument("empty anomaly zone".into()));
        }
        let mut attempts = 0;
        while points.len() < spec.point_count {
            attempts += 1;
            if attempts > 1000 * spec.point_count {
                return Err(Error::InvalidArgument(
                    "could not place the requested point anomalies; zone too crowded".into(),
                ));
            }
            let t = rng.gen_range(zone_lo..zone_hi);
            let taken = labels[t] != 0
                || points.iter().any(|&(_, pt): &(usize, usize)| {
                    (pt as i64 - t as i64).unsigned_abs() as usize <= spec.min_separation
                });
            if taken {
                continue;
            }
            let v = points.len() % d;
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let old = values.get(v, t);
            values.set(v, t, old + sign * spec.point_magnitude);
            labels[t] = 1;
            points.push((v, t));
        }
        points.sort_by_key(|&(_, t)| t);
    }

    let series = TimeSeries::with_labels(&spec.id, values, labels)?;
    Ok(SyntheticSeries { series, intervals, points })
}

fn apply_sequence_anomaly(
    values: &mut Matrix,
    spec: &SyntheticSpec,
    kind: SequenceAnomalyKind,
    start: usize,
    end: usize,
) {
    let d = values.rows();
    match kind {
        SequenceAnomalyKind::Flatline => {
            // exact constancy: the stuck value replaces signal and noise
            for v in 0..d {
                let held = values.get(v, start);
                for t in start..=end {
                    values.set(v, t, held);
                }
            }
        }
        SequenceAnomalyKind::FrequencyShift => {
            for v in 0..d {
                for t in start..=end {
                    values.set(v, t, base_value(&spec.base, v, t, 3.0));
                }
            }
        }
        SequenceAnomalyKind::LevelShift => {
            for v in 0..d {
                for t in start..=end {
                    let old = values.get(v, t);
                    values.set(v, t, old + spec.seq_magnitude);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_spec() -> SyntheticSpec {
        SyntheticSpec {
            length: 2000,
            seq_count: 3,
            seq_len: (20, 40),
            min_separation: 80,
            anomaly_zone: (0.5, 1.0),
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn labels_mark_exactly_the_planted_anomalies() {
        let mut spec = seq_spec();
        spec.point_count = 5;
        let out = generate(&spec).unwrap();
        let labels = out.series.labels.as_ref().unwrap();
        let mut expect = vec![0u8; spec.length];
        for iv in &out.intervals {
            for l in expect[iv.start..=iv.end].iter_mut() {
                *l = 1;
            }
        }
        for &(_, t) in &out.points {
            expect[t] = 1;
        }
        assert_eq!(labels, &expect);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = seq_spec();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn anomalies_respect_zone_and_separation() {
        let spec = seq_spec();
        let out = generate(&spec).unwrap();
        assert_eq!(out.intervals.len(), 3);
        let zone_lo = spec.length / 2;
        for iv in &out.intervals {
            assert!(iv.start >= zone_lo && iv.end < spec.length);
            let len = iv.len();
            assert!((20..=40).contains(&len), "length {len} outside range");
        }
        for pair in out.intervals.windows(2) {
            let gap = pair[1].start - pair[0].end - 1;
            assert!(gap >= spec.min_separation, "gap {gap} too small");
        }
    }

    #[test]
    fn flatline_segments_are_exactly_constant() {
        let mut spec = seq_spec();
        spec.seq_kinds = vec![SequenceAnomalyKind::Flatline];
        let out = generate(&spec).unwrap();
        for iv in &out.intervals {
            for v in 0..spec.variates {
                let held = out.series.values.get(v, iv.start);
                for t in iv.start..=iv.end {
                    assert_eq!(out.series.values.get(v, t), held);
                }
            }
        }
    }

    #[test]
    fn frequency_shift_departs_from_the_clean_signal() {
        let mut spec = seq_spec();
        spec.seq_kinds = vec![SequenceAnomalyKind::FrequencyShift];
        spec.noise_std = 0.0;
        let out = generate(&spec).unwrap();
        let clean = generate(&SyntheticSpec { seq_count: 0, ..spec.clone() }).unwrap();
        let iv = out.intervals[0];
        let diff: f64 = (iv.start..=iv.end)
            .map(|t| (out.series.values.get(0, t) - clean.series.values.get(0, t)).abs())
            .sum();
        assert!(diff > 1.0, "shifted segment too close to the clean signal");
    }

    #[test]
    fn level_shift_moves_the_segment_mean() {
        let mut spec = seq_spec();
        spec.seq_kinds = vec![SequenceAnomalyKind::LevelShift];
        spec.seq_magnitude = 2.5;
        spec.noise_std = 0.0;
        let out = generate(&spec).unwrap();
        let clean = generate(&SyntheticSpec { seq_count: 0, ..spec.clone() }).unwrap();
        let iv = out.intervals[0];
        for t in iv.start..=iv.end {
            let delta = out.series.values.get(0, t) - clean.series.values.get(0, t);
            assert!((delta - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_spec_has_no_labels_set() {
        let spec = SyntheticSpec { length: 500, ..SyntheticSpec::default() };
        let out = generate(&spec).unwrap();
        assert!(out.series.labels.as_ref().unwrap().iter().all(|&l| l == 0));
        assert!(out.intervals.is_empty());
        assert!(out.points.is_empty());
        assert!(out.series.values.all_finite());
    }

    #[test]
    fn point_spikes_hit_single_cells() {
        let spec = SyntheticSpec {
            length: 1000,
            point_count: 8,
            point_magnitude: 3.0,
            noise_std: 0.0,
            anomaly_zone: (0.4, 1.0),
            min_separation: 10,
            ..SyntheticSpec::default()
        };
        let out = generate(&spec).unwrap();
        let clean = generate(&SyntheticSpec { point_count: 0, ..spec.clone() }).unwrap();
        assert_eq!(out.points.len(), 8);
        for &(v, t) in &out.points {
            let delta = (out.series.values.get(v, t) - clean.series.values.get(v, t)).abs();
            assert!((delta - 3.0).abs() < 1e-12);
            // the other variate is untouched at the spike position
            let other = 1 - v;
            assert_eq!(
                out.series.values.get(other, t),
                clean.series.values.get(other, t)
            );
        }
    }

    #[test]
    fn infeasible_layouts_are_rejected() {
        let spec = SyntheticSpec {
            length: 300,
            seq_count: 5,
            seq_len: (40, 60),
            min_separation: 50,
            anomaly_zone: (0.5, 1.0),
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn all_kinds_cycle_through() {
        let mut spec = seq_spec();
        spec.seq_kinds = vec![
            SequenceAnomalyKind::Flatline,
            SequenceAnomalyKind::FrequencyShift,
            SequenceAnomalyKind::LevelShift,
        ];
        // 3 anomalies with 3 kinds: the first must be exactly flat
        let out = generate(&spec).unwrap();
        let iv = out.intervals[0];
        let held = out.series.values.get(0, iv.start);
        assert!((iv.start..=iv.end).all(|t| out.series.values.get(0, t) == held));
    }

    #[test]
    fn spec_serializes_round_trip() {
        let spec = seq_spec();
        let text = serde_json::to_string_pretty(&spec).unwrap();
        let back: SyntheticSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
