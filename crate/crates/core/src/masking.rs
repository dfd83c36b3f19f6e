//! Self-supervision masks: disjoint random point masks over the value grid
//! and contiguous balanced sequence segments, plus sample materialization.
//!
//! Masked cells are filled with the sentinel value 0 (series are expected to
//! be normalized first), targets keep the original values. Every cell of the
//! grid is covered by exactly one mask, so overlaying all imputations
//! reconstructs a full series.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Matrix;

/// Sentinel written into masked positions of a normalized series.
pub const SENTINEL: f64 = 0.0;

/// Disjoint random point masks partitioning a `d x t` grid.
///
/// Cells are flat indices `v * t + i` (variate-major). Mask sizes are
/// balanced: they differ by at most one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMaskSet {
    pub d: usize,
    pub t: usize,
    pub masks: Vec<Vec<usize>>,
}

/// Contiguous balanced segments partitioning `[0, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMaskSet {
    pub t: usize,
    /// Inclusive `(start, end)` per segment, in temporal order.
    pub segments: Vec<(usize, usize)>,
}

/// Which positions of a sample are masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MaskSpec {
    /// Flat cell indices (`v * t + i`), sorted ascending.
    Cells(Vec<usize>),
    /// Inclusive timestep range masked across all variates.
    Segment { start: usize, end: usize },
}

/// One self-supervised training sample: sentinel-filled input plus the
/// original values at the masked positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub input: Matrix,
    pub mask: MaskSpec,
    /// Original values at masked positions. For `Cells` this follows the
    /// cell order; for `Segment` it is the `d x len` block, variate-major.
    pub target: Vec<f64>,
}

/// Splits the `d x t` grid into `m` disjoint uniformly random masks.
/// The first `d*t mod m` masks carry one extra element.
pub fn make_point_masks(d: usize, t: usize, m: usize, seed: u64) -> Result<PointMaskSet> {
    let elements = d * t;
    if elements == 0 {
        return Err(Error::EmptyInput("cannot mask an empty grid"));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("mask count must be positive".into()));
    }
    if m > elements {
        return Err(Error::MaskCountExceedsElements { masks: m, elements });
    }
    let mut cells: Vec<usize> = (0..elements).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cells.shuffle(&mut rng);
    let base = elements / m;
    let extra = elements % m;
    let mut masks = Vec::with_capacity(m);
    let mut cursor = 0;
    for j in 0..m {
        let size = base + usize::from(j < extra);
        let mut mask: Vec<usize> = cells[cursor..cursor + size].to_vec();
        mask.sort_unstable();
        masks.push(mask);
        cursor += size;
    }
    Ok(PointMaskSet { d, t, masks })
}

/// Splits `[0, t)` into `n` contiguous segments; the first `t mod n`
/// segments are one timestep longer.
pub fn make_sequence_masks(t: usize, n: usize) -> Result<SequenceMaskSet> {
    if t == 0 {
        return Err(Error::EmptyInput("cannot mask an empty series"));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("segment count must be positive".into()));
    }
    if n > t {
        return Err(Error::InvalidArgument(format!(
            "cannot split {t} timesteps into {n} non-empty segments"
        )));
    }
    let base = t / n;
    let extra = t % n;
    let mut segments = Vec::with_capacity(n);
    let mut start = 0;
    for j in 0..n {
        let len = base + usize::from(j < extra);
        segments.push((start, start + len - 1));
        start += len;
    }
    Ok(SequenceMaskSet { t, segments })
}

/// One sentinel-filled sample per point mask.
pub fn materialize_point_samples(x: &Matrix, set: &PointMaskSet) -> Result<Vec<MaskedSample>> {
    if x.rows() != set.d || x.cols() != set.t {
        return Err(Error::DimensionMismatch(format!(
            "mask set is {}x{} but series is {}x{}",
            set.d,
            set.t,
            x.rows(),
            x.cols()
        )));
    }
    let mut samples = Vec::with_capacity(set.masks.len());
    for mask in &set.masks {
        let mut input = x.clone();
        let mut target = Vec::with_capacity(mask.len());
        for &cell in mask {
            target.push(x.data()[cell]);
            input.data_mut()[cell] = SENTINEL;
        }
        samples.push(MaskedSample { input, mask: MaskSpec::Cells(mask.clone()), target });
    }
    Ok(samples)
}

/// One sentinel-filled sample per segment; the segment is masked across all
/// variates.
pub fn materialize_sequence_samples(
    x: &Matrix,
    set: &SequenceMaskSet,
) -> Result<Vec<MaskedSample>> {
    if x.cols() != set.t {
        return Err(Error::DimensionMismatch(format!(
            "mask set covers {} timesteps but series has {}",
            set.t,
            x.cols()
        )));
    }
    let d = x.rows();
    let mut samples = Vec::with_capacity(set.segments.len());
    for &(start, end) in &set.segments {
        let len = end - start + 1;
        let mut input = x.clone();
        let mut target = Vec::with_capacity(d * len);
        for v in 0..d {
            for i in start..=end {
                target.push(x.get(v, i));
                input.set(v, i, SENTINEL);
            }
        }
        samples.push(MaskedSample { input, mask: MaskSpec::Segment { start, end }, target });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counting_matrix(d: usize, t: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|v| (0..t).map(|i| (v * t + i) as f64 + 1.0).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn point_masks_partition_evenly_when_divisible() {
        // d=2, T=8, M=4: 16 cells -> every mask has exactly 4
        let set = make_point_masks(2, 8, 4, 9).unwrap();
        assert!(set.masks.iter().all(|m| m.len() == 4));
        let mut all: Vec<usize> = set.masks.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn point_mask_sizes_balance_within_one() {
        // 10 cells into 3 masks -> sizes {4, 3, 3}
        let set = make_point_masks(1, 10, 3, 1).unwrap();
        let sizes: Vec<usize> = set.masks.iter().map(|m| m.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn one_mask_per_cell_is_allowed() {
        let set = make_point_masks(2, 3, 6, 5).unwrap();
        assert!(set.masks.iter().all(|m| m.len() == 1));
    }

    #[test]
    fn too_many_masks_is_an_error() {
        match make_point_masks(2, 3, 7, 0) {
            Err(Error::MaskCountExceedsElements { masks: 7, elements: 6 }) => {}
            other => panic!("expected mask-count error, got {other:?}"),
        }
    }

    #[test]
    fn zero_masks_is_an_error() {
        assert!(make_point_masks(1, 4, 0, 0).is_err());
    }

    #[test]
    fn same_seed_reproduces_masks() {
        let a = make_point_masks(3, 17, 5, 1234).unwrap();
        let b = make_point_masks(3, 17, 5, 1234).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ_somewhere() {
        let base = make_point_masks(3, 17, 5, 0).unwrap();
        let any_differ = (1..=10u64).any(|s| make_point_masks(3, 17, 5, s).unwrap() != base);
        assert!(any_differ, "ten reseeds never changed the partition");
    }

    #[test]
    fn sequence_masks_balance_within_one() {
        // T=10, N=3 -> lengths {4, 3, 3}
        let set = make_sequence_masks(10, 3).unwrap();
        assert_eq!(set.segments, vec![(0, 3), (4, 6), (7, 9)]);
    }

    #[test]
    fn single_segment_covers_everything() {
        let set = make_sequence_masks(7, 1).unwrap();
        assert_eq!(set.segments, vec![(0, 6)]);
    }

    #[test]
    fn more_segments_than_timesteps_is_an_error() {
        assert!(make_sequence_masks(4, 5).is_err());
    }

    #[test]
    fn point_samples_zero_only_their_mask() {
        let x = counting_matrix(2, 8);
        let set = make_point_masks(2, 8, 4, 3).unwrap();
        let samples = materialize_point_samples(&x, &set).unwrap();
        for (sample, mask) in samples.iter().zip(&set.masks) {
            for cell in 0..16 {
                if mask.contains(&cell) {
                    assert_eq!(sample.input.data()[cell], SENTINEL);
                } else {
                    assert_eq!(sample.input.data()[cell], x.data()[cell]);
                }
            }
            let expect: Vec<f64> = mask.iter().map(|&c| x.data()[c]).collect();
            assert_eq!(sample.target, expect);
        }
    }

    #[test]
    fn overlaying_all_targets_restores_the_series() {
        let x = counting_matrix(3, 11);
        let set = make_point_masks(3, 11, 7, 21).unwrap();
        let samples = materialize_point_samples(&x, &set).unwrap();
        let mut rebuilt = Matrix::zeros(3, 11);
        for sample in &samples {
            if let MaskSpec::Cells(cells) = &sample.mask {
                for (j, &cell) in cells.iter().enumerate() {
                    rebuilt.data_mut()[cell] = sample.target[j];
                }
            }
        }
        assert_eq!(rebuilt, x);
    }

    #[test]
    fn single_mask_blanks_the_whole_series() {
        let x = counting_matrix(2, 5);
        let set = make_point_masks(2, 5, 1, 0).unwrap();
        let samples = materialize_point_samples(&x, &set).unwrap();
        assert!(samples[0].input.data().iter().all(|&v| v == SENTINEL));
        assert_eq!(samples[0].target.len(), 10);
    }

    #[test]
    fn sequence_samples_mask_all_variates_of_the_segment() {
        let x = counting_matrix(2, 10);
        let set = make_sequence_masks(10, 3).unwrap();
        let samples = materialize_sequence_samples(&x, &set).unwrap();
        let s0 = &samples[0];
        for v in 0..2 {
            for i in 0..=3 {
                assert_eq!(s0.input.get(v, i), SENTINEL);
            }
            for i in 4..10 {
                assert_eq!(s0.input.get(v, i), x.get(v, i));
            }
        }
        // target is the 2x4 block, variate-major
        assert_eq!(s0.target, vec![1.0, 2.0, 3.0, 4.0, 11.0, 12.0, 13.0, 14.0]);
    }

    #[test]
    fn mask_sets_round_trip_through_json() {
        let set = make_point_masks(2, 9, 4, 77).unwrap();
        let text = serde_json::to_string(&set).unwrap();
        let back: PointMaskSet = serde_json::from_str(&text).unwrap();
        assert_eq!(set, back);
        let seq = make_sequence_masks(9, 2).unwrap();
        let text = serde_json::to_string(&seq).unwrap();
        let back: SequenceMaskSet = serde_json::from_str(&text).unwrap();
        assert_eq!(seq, back);
    }

    #[test]
    fn random_configs_stay_disjoint_and_exhaustive() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for _ in 0..200 {
            let d = rng.gen_range(1..=4usize);
            let t = rng.gen_range(1..=48usize);
            let m = rng.gen_range(1..=d * t);
            let set = make_point_masks(d, t, m, rng.gen()).unwrap();
            let mut seen = vec![false; d * t];
            for mask in &set.masks {
                for &cell in mask {
                    assert!(!seen[cell], "cell {cell} masked twice");
                    seen[cell] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "partition missed a cell");
            let (min, max) = set
                .masks
                .iter()
                .map(Vec::len)
                .fold((usize::MAX, 0), |(lo, hi), s| (lo.min(s), hi.max(s)));
            assert!(max - min <= 1, "mask sizes unbalanced: {min}..{max}");
        }
    }
}
