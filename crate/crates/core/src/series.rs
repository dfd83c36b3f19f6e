//! Core containers for multivariate series: dense value matrices, labeled
//! series, anomaly intervals, per-variate normalization and window slicing.
//!
//! Values are stored variate-major: a `Matrix` is `d` rows (variates) by
//! `t` columns (timesteps). All detection-facing code works in normalized
//! space; [`NormalizationStats`] must be fit on training data only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor below which a per-variate standard deviation is treated as zero
/// and clamped to 1.0 to keep normalization finite.
pub const STD_FLOOR: f64 = 1e-8;

/// Dense `d x t` matrix of series values, row-major per variate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    d: usize,
    t: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix with `d` variates and `t` timesteps.
    pub fn zeros(d: usize, t: usize) -> Self {
        Matrix { d, t, data: vec![0.0; d * t] }
    }

    /// Builds from per-variate rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("matrix with no rows"));
        }
        let t = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != t {
                return Err(Error::DimensionMismatch(format!(
                    "row 0 has {} columns but row {} has {}",
                    t,
                    i,
                    r.len()
                )));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * t);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Matrix { d: rows.len(), t, data })
    }

    /// Single-variate matrix from a flat slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Matrix { d: 1, t: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.d
    }

    pub fn cols(&self) -> usize {
        self.t
    }

    pub fn get(&self, v: usize, i: usize) -> f64 {
        self.data[v * self.t + i]
    }

    pub fn set(&mut self, v: usize, i: usize, value: f64) {
        self.data[v * self.t + i] = value;
    }

    /// Row `v` as a slice over timesteps.
    pub fn row(&self, v: usize) -> &[f64] {
        &self.data[v * self.t..(v + 1) * self.t]
    }

    /// Column `i` across variates.
    pub fn col(&self, i: usize) -> Vec<f64> {
        (0..self.d).map(|v| self.get(v, i)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copy of columns `[start, start+len)` across all variates.
    pub fn slice_cols(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.t, "column slice out of range");
        let mut out = Matrix::zeros(self.d, len);
        for v in 0..self.d {
            for i in 0..len {
                out.set(v, i, self.get(v, start + i));
            }
        }
        out
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// A (possibly labeled) multivariate time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    /// Identifier carried through exports.
    pub id: String,
    /// `d x T` values.
    pub values: Matrix,
    /// Optional per-timestep ground truth, 1 = anomalous.
    pub labels: Option<Vec<u8>>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, values: Matrix) -> Self {
        TimeSeries { id: id.into(), values, labels: None }
    }

    pub fn with_labels(id: impl Into<String>, values: Matrix, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != values.cols() {
            return Err(Error::DimensionMismatch(format!(
                "labels length {} does not match series length {}",
                labels.len(),
                values.cols()
            )));
        }
        Ok(TimeSeries { id: id.into(), values, labels: Some(labels) })
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Contiguous sub-series over `[start, start+len)`, labels sliced along.
    pub fn slice(&self, start: usize, len: usize) -> TimeSeries {
        TimeSeries {
            id: self.id.clone(),
            values: self.values.slice_cols(start, len),
            labels: self.labels.as_ref().map(|l| l[start..start + len].to_vec()),
        }
    }
}

/// Closed timestep interval `[start, end]` flagged anomalous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnomalyInterval {
    pub start: usize,
    pub end: usize,
}

impl AnomalyInterval {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidArgument(format!(
                "interval start {start} after end {end}"
            )));
        }
        Ok(AnomalyInterval { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn overlaps(&self, other: &AnomalyInterval) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    /// Per-timestep 0/1 labels of length `t_len` for a set of intervals.
    pub fn to_labels(intervals: &[AnomalyInterval], t_len: usize) -> Vec<u8> {
        let mut labels = vec![0u8; t_len];
        for iv in intervals {
            for l in labels.iter_mut().take(iv.end.min(t_len - 1) + 1).skip(iv.start) {
                *l = 1;
            }
        }
        labels
    }
}

/// Per-variate affine normalization statistics (population moments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Identity stats (mean 0, std 1) for `d` variates; normalizing with
    /// these is a no-op.
    pub fn identity(d: usize) -> Self {
        NormalizationStats { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn variates(&self) -> usize {
        self.mean.len()
    }
}

/// Fits per-variate mean and population standard deviation over the pooled
/// timesteps of all given matrices. Standard deviations below [`STD_FLOOR`]
/// are clamped to 1.0.
pub fn fit_normalizer(parts: &[&Matrix]) -> Result<NormalizationStats> {
    let total: usize = parts.iter().map(|m| m.cols()).sum();
    if parts.is_empty() || total == 0 {
        return Err(Error::EmptyInput("no timesteps to fit normalizer"));
    }
    let d = parts[0].rows();
    for m in parts {
        if m.rows() != d {
            return Err(Error::DimensionMismatch(format!(
                "variate count differs across series: {} vs {}",
                d,
                m.rows()
            )));
        }
    }
    let mut mean = vec![0.0; d];
    for m in parts {
        for v in 0..d {
            mean[v] += m.row(v).iter().sum::<f64>();
        }
    }
    for mv in mean.iter_mut() {
        *mv /= total as f64;
    }
    let mut var = vec![0.0; d];
    for m in parts {
        for v in 0..d {
            var[v] += m.row(v).iter().map(|x| (x - mean[v]).powi(2)).sum::<f64>();
        }
    }
    let std = var
        .iter()
        .map(|&s| {
            let sd = (s / total as f64).sqrt();
            if sd < STD_FLOOR {
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(NormalizationStats { mean, std })
}

/// Applies `(x - mean) / std` per variate.
pub fn normalize(x: &Matrix, stats: &NormalizationStats) -> Result<Matrix> {
    if x.rows() != stats.variates() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} variates, stats have {}",
            x.rows(),
            stats.variates()
        )));
    }
    let mut out = x.clone();
    for v in 0..x.rows() {
        let (m, s) = (stats.mean[v], stats.std[v]);
        for i in 0..x.cols() {
            out.set(v, i, (x.get(v, i) - m) / s);
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(x: &Matrix, stats: &NormalizationStats) -> Result<Matrix> {
    if x.rows() != stats.variates() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} variates, stats have {}",
            x.rows(),
            stats.variates()
        )));
    }
    let mut out = x.clone();
    for v in 0..x.rows() {
        let (m, s) = (stats.mean[v], stats.std[v]);
        for i in 0..x.cols() {
            out.set(v, i, x.get(v, i) * s + m);
        }
    }
    Ok(out)
}

/// Normalizes a series in place, labels pass through unchanged.
pub fn normalize_series(x: &TimeSeries, stats: &NormalizationStats) -> Result<TimeSeries> {
    Ok(TimeSeries {
        id: x.id.clone(),
        values: normalize(&x.values, stats)?,
        labels: x.labels.clone(),
    })
}

/// Half-open window `[start, start+len)` over a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSlice {
    pub start: usize,
    pub len: usize,
}

impl WindowSlice {
    /// Last timestep covered (inclusive).
    pub fn end(&self) -> usize {
        self.start + self.len - 1
    }
}

/// Window starts at `0, stride, 2*stride, ...`; if the regular grid does not
/// reach the final timestep, one extra right-aligned window ending at `T-1`
/// is appended (its start may duplicate coverage). A window longer than the
/// series degrades to a single whole-series window. Whenever
/// `stride <= window` the union of windows covers every timestep.
pub fn slice_windows(t_len: usize, window: usize, stride: usize) -> Result<Vec<WindowSlice>> {
    if t_len == 0 {
        return Err(Error::EmptyInput("cannot window an empty series"));
    }
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "window and stride must be positive".into(),
        ));
    }
    if window > t_len {
        return Ok(vec![WindowSlice { start: 0, len: t_len }]);
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= t_len {
        out.push(WindowSlice { start, len: window });
        start += stride;
    }
    let last_end = out.last().map(|w| w.end()).unwrap_or(0);
    if last_end < t_len - 1 {
        out.push(WindowSlice { start: t_len - window, len: window });
    }
    Ok(out)
}
