//! Self-supervised training of the imputation models.
//!
//! Each training window is masked several disjoint ways; the model imputes
//! every masked region, the imputations are overlaid into one assembled
//! window, and the loss is the time-averaged L1 distance between the
//! assembly and the original window. Optimization is Adam with global-norm
//! gradient clipping. The last fraction of every series is held out: it
//! drives best-epoch selection and is returned for threshold calibration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imputer::{BoundCore, HeadKind, ImputerModel};
use crate::imputer::{build_recon_window, build_segment_imputation};
use crate::masking::{make_point_masks, make_sequence_masks, PointMaskSet, SequenceMaskSet};
use crate::series::{fit_normalizer, normalize, Matrix, TimeSeries};
use crate::tape::{SlotId, Tape};

/// Everything that shapes a training run. Deserializes with defaults, so
/// a JSON config only needs the fields it wants to override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Window length the model operates on.
    pub window: usize,
    /// Downsample tree depth.
    pub levels: usize,
    /// Convolution kernel size (odd).
    pub kernel: usize,
    /// Hidden-channel multiplier inside the convolution banks.
    pub hidden: usize,
    /// Number of disjoint point masks per window (reconstruction head).
    pub point_masks: usize,
    /// Number of contiguous segments per window (forecast head).
    pub seq_masks: usize,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    /// Trailing fraction of each series held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub head: HeadKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 64,
            levels: 2,
            kernel: 5,
            hidden: 4,
            point_masks: 4,
            seq_masks: 8,
            epochs: 100,
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 5.0,
            val_fraction: 0.2,
            seed: 42,
            head: HeadKind::Reconstruction,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidArgument("window must be at least 2".into()));
        }
        if self.point_masks == 0 {
            return Err(Error::InvalidArgument("need at least one point mask".into()));
        }
        if self.seq_masks < 2 {
            return Err(Error::InvalidArgument(
                "need at least two segments so every segment keeps context".into(),
            ));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("epochs and batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be finite and >= 0".into()));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument("validation fraction must be in (0, 1)".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::InvalidArgument("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch progress record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of a training run: the best-validation model, the loss history,
/// and the normalized held-out tail of every input series (for threshold
/// calibration downstream).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ImputerModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub validation: Vec<Matrix>,
}

/// Time-averaged L1 reconstruction distance:
/// `(1/T) * sum_t sum_v |xhat[v][t] - x[v][t]|`.
///
/// For x = [0, 0] and xhat = [1, 3]: (|1| + |3|) / 2 = 2.
pub fn reconstruction_loss(x: &Matrix, xhat: &Matrix) -> Result<f64> {
    if x.rows() != xhat.rows() || x.cols() != xhat.cols() {
        return Err(Error::DimensionMismatch(format!(
            "loss operands {}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            xhat.rows(),
            xhat.cols()
        )));
    }
    if x.cols() == 0 {
        return Err(Error::EmptyInput("empty loss operands"));
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(a, b)| (b - a).abs())
        .sum();
    Ok(sum / x.cols() as f64)
}

fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    // splitmix64-style mix so nearby (epoch, window) pairs decorrelate
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the assembled reconstruction of `window` on the tape: every mask
/// is applied in turn (masked cells zeroed, the sentinel in normalized
/// space), imputed, and the imputed cells are overlaid into one full
/// window. Masks partition the grid, so the overlay covers every cell.
pub(crate) fn build_point_assembly(
    tape: &mut Tape,
    window: SlotId,
    core: &BoundCore,
    meta: &crate::imputer::ModelMeta,
    masks: &PointMaskSet,
) -> SlotId {
    let (d, t) = (meta.d, meta.window);
    let mut acc: Option<SlotId> = None;
    for cells in &masks.masks {
        let mut keep = Matrix::zeros(d, t);
        for v in keep.data_mut() {
            *v = 1.0;
        }
        for &c in cells {
            keep.data_mut()[c] = 0.0;
        }
        let keep_in = tape.input(keep);
        let masked = tape.mul(window, keep_in);
        let recon = build_recon_window(tape, masked, core, meta);
        let picked = tape.gather_cells(recon, cells.clone());
        let placed = tape.scatter_cells(picked, cells.clone(), d, t);
        acc = Some(match acc {
            None => placed,
            Some(a) => tape.add(a, placed),
        });
    }
    acc.expect("mask set is never empty")
}

/// Assembled bidirectional imputation: every segment is forecast from its
/// two contexts and the segments are overlaid into one full window.
pub(crate) fn build_sequence_assembly(
    tape: &mut Tape,
    window: SlotId,
    fwd: &BoundCore,
    bwd: &BoundCore,
    meta: &crate::imputer::ModelMeta,
    masks: &SequenceMaskSet,
) -> Result<SlotId> {
    let (d, t) = (meta.d, meta.window);
    let mut acc: Option<SlotId> = None;
    for &(start, end) in &masks.segments {
        let seg = build_segment_imputation(tape, window, start, end, fwd, bwd, meta)?;
        let cells: Vec<usize> = (0..d)
            .flat_map(|v| (start..=end).map(move |i| v * t + i))
            .collect();
        let placed = tape.scatter_cells(seg, cells, d, t);
        acc = Some(match acc {
            None => placed,
            Some(a) => tape.add(a, placed),
        });
    }
    acc.ok_or(Error::EmptyInput("empty segment set"))
}

/// Scalar loss slot: time-averaged L1 distance between the assembled
/// imputation of `window` and `target`.
pub(crate) fn build_window_loss(
    tape: &mut Tape,
    window: &Matrix,
    target: &Matrix,
    head: &BoundHeadRef<'_>,
    meta: &crate::imputer::ModelMeta,
    point_masks: Option<&PointMaskSet>,
    seq_masks: Option<&SequenceMaskSet>,
) -> Result<SlotId> {
    let w_in = tape.input(window.clone());
    let t_in = tape.input(target.clone());
    let assembled = match head {
        BoundHeadRef::Recon(core) => {
            build_point_assembly(tape, w_in, core, meta, point_masks.expect("point masks"))
        }
        BoundHeadRef::Bidi { forward, backward } => build_sequence_assembly(
            tape,
            w_in,
            forward,
            backward,
            meta,
            seq_masks.expect("segment masks"),
        )?,
    };
    let diff = tape.sub(assembled, t_in);
    let a = tape.abs(diff);
    let s = tape.sum_all(a);
    Ok(tape.scale(s, 1.0 / meta.window as f64))
}

/// Value-level single-segment imputation of a window (no gradients).
pub(crate) fn build_segment_imputation_values(
    model: &ImputerModel,
    window: &Matrix,
    start: usize,
    end: usize,
) -> Result<Matrix> {
    let crate::imputer::HeadParams::Bidirectional { forward, backward } = &model.head else {
        return Err(Error::HeadMismatch {
            expected: HeadKind::BidirectionalForecast.to_string(),
            found: model.head_kind().to_string(),
        });
    };
    check_window_shape(model, window)?;
    let mut tape = Tape::new();
    let bf = forward.bind(&mut tape);
    let bb = backward.bind(&mut tape);
    let w_in = tape.input(window.clone());
    let seg = build_segment_imputation(&mut tape, w_in, start, end, &bf, &bb, &model.meta)?;
    Ok(tape.val(seg).clone())
}

/// Value-level full re-imputation of a window under a segment partition.
pub(crate) fn build_sequence_assembly_values(
    model: &ImputerModel,
    window: &Matrix,
    masks: &SequenceMaskSet,
) -> Result<Matrix> {
    let crate::imputer::HeadParams::Bidirectional { forward, backward } = &model.head else {
        return Err(Error::HeadMismatch {
            expected: HeadKind::BidirectionalForecast.to_string(),
            found: model.head_kind().to_string(),
        });
    };
    check_window_shape(model, window)?;
    let mut tape = Tape::new();
    let bf = forward.bind(&mut tape);
    let bb = backward.bind(&mut tape);
    let w_in = tape.input(window.clone());
    let asm = build_sequence_assembly(&mut tape, w_in, &bf, &bb, &model.meta, masks)?;
    Ok(tape.val(asm).clone())
}

/// L1 imputation loss of one window: the model re-imputes `input` under
/// the given mask partition and the assembled result is compared with
/// `target`, time-averaged. A reconstruction head takes `point_masks`, a
/// bidirectional-forecast head takes `seq_masks`. In training both
/// matrices are the same window; a caller probing the loss surface may
/// pass a different `target`.
pub fn imputation_loss(
    model: &ImputerModel,
    input: &Matrix,
    target: &Matrix,
    point_masks: Option<&PointMaskSet>,
    seq_masks: Option<&SequenceMaskSet>,
) -> Result<f64> {
    check_loss_inputs(model, input, target, point_masks, seq_masks)?;
    let mut tape = Tape::new();
    let (bound, _slots) = model.bind(&mut tape);
    let head = bind_head(&bound);
    let loss = build_window_loss(&mut tape, input, target, &head, &model.meta, point_masks, seq_masks)?;
    Ok(tape.val(loss).get(0, 0))
}

/// [`imputation_loss`] plus its gradient with respect to every parameter
/// tensor, in [`ImputerModel::for_each_tensor`] order. Tensors the loss
/// does not touch get zero gradients.
pub fn imputation_gradients(
    model: &ImputerModel,
    input: &Matrix,
    target: &Matrix,
    point_masks: Option<&PointMaskSet>,
    seq_masks: Option<&SequenceMaskSet>,
) -> Result<(f64, Vec<Matrix>)> {
    check_loss_inputs(model, input, target, point_masks, seq_masks)?;
    let mut tape = Tape::new();
    let (bound, slots) = model.bind(&mut tape);
    let head = bind_head(&bound);
    let loss = build_window_loss(&mut tape, input, target, &head, &model.meta, point_masks, seq_masks)?;
    let value = tape.val(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(slots.len());
    let mut i = 0;
    model.for_each_tensor(&mut |p| {
        out.push(match grads.get(slots[i]) {
            Some(g) => g.clone(),
            None => Matrix::zeros(p.rows(), p.cols()),
        });
        i += 1;
    });
    Ok((value, out))
}

fn check_loss_inputs(
    model: &ImputerModel,
    input: &Matrix,
    target: &Matrix,
    point_masks: Option<&PointMaskSet>,
    seq_masks: Option<&SequenceMaskSet>,
) -> Result<()> {
    check_window_shape(model, input)?;
    check_window_shape(model, target)?;
    match model.head_kind() {
        HeadKind::Reconstruction => {
            let Some(pm) = point_masks else {
                return Err(Error::InvalidArgument(
                    "a reconstruction head needs point masks".into(),
                ));
            };
            if pm.d != model.meta.d || pm.t != model.meta.window {
                return Err(Error::DimensionMismatch(format!(
                    "point masks cover a {}x{} grid, model windows are {}x{}",
                    pm.d, pm.t, model.meta.d, model.meta.window
                )));
            }
        }
        HeadKind::BidirectionalForecast => {
            let Some(sm) = seq_masks else {
                return Err(Error::InvalidArgument(
                    "a bidirectional-forecast head needs segment masks".into(),
                ));
            };
            if sm.t != model.meta.window {
                return Err(Error::DimensionMismatch(format!(
                    "segment masks cover {} timesteps, model windows are {}",
                    sm.t, model.meta.window
                )));
            }
        }
    }
    Ok(())
}

fn check_window_shape(model: &ImputerModel, window: &Matrix) -> Result<()> {
    if window.rows() != model.meta.d || window.cols() != model.meta.window {
        return Err(Error::DimensionMismatch(format!(
            "expected {}x{} window, found {}x{}",
            model.meta.d,
            model.meta.window,
            window.rows(),
            window.cols()
        )));
    }
    Ok(())
}

/// Borrowed view of a bound head (the bound cores live on the caller).
pub(crate) enum BoundHeadRef<'a> {
    Recon(&'a BoundCore),
    Bidi { forward: &'a BoundCore, backward: &'a BoundCore },
}

fn bind_head<'a>(
    bound: &'a crate::imputer::BoundHead,
) -> BoundHeadRef<'a> {
    match bound {
        crate::imputer::BoundHead::Recon(c) => BoundHeadRef::Recon(c),
        crate::imputer::BoundHead::Bidi { forward, backward } => {
            BoundHeadRef::Bidi { forward, backward }
        }
    }
}

/// Adam with bias correction over the model's flat tensor list.
struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    steps: usize,
}

impl Adam {
    fn new(model: &ImputerModel) -> Self {
        let mut m = Vec::new();
        model.for_each_tensor(&mut |p| m.push(Matrix::zeros(p.rows(), p.cols())));
        Adam { v: m.clone(), m, steps: 0 }
    }

    fn step(&mut self, model: &mut ImputerModel, grads: &mut [Matrix], cfg: &TrainConfig) {
        // global-norm clip across every tensor at once
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > cfg.clip {
            let s = cfg.clip / norm;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let mut idx = 0;
        model.for_each_tensor_mut(&mut |p| {
            let (m, v, g) = (&mut self.m[idx], &mut self.v[idx], &grads[idx]);
            for ((pv, mv), (vv, gv)) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            idx += 1;
        });
    }
}

/// Trains a model on the given series. The head in `cfg` decides the
/// masking style. Returns the epoch with the lowest validation loss.
pub fn train(data: &[TimeSeries], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = data[0].values.rows();
    for s in data {
        if s.values.rows() != d {
            return Err(Error::DimensionMismatch(format!(
                "series '{}' has {} variates, expected {}",
                s.id,
                s.values.rows(),
                d
            )));
        }
        if !s.values.all_finite() {
            return Err(Error::InvalidArgument(format!(
                "series '{}' contains non-finite values",
                s.id
            )));
        }
    }
    let mut fit_parts = Vec::new();
    let mut splits = Vec::new();
    for s in data {
        let t = s.values.cols();
        let val_len = ((t as f64) * cfg.val_fraction).floor() as usize;
        if val_len < cfg.window {
            return Err(Error::InvalidArgument(format!(
                "series '{}': validation split ({} steps) is shorter than one window ({})",
                s.id, val_len, cfg.window
            )));
        }
        let opt_len = t - val_len;
        if opt_len < cfg.window {
            return Err(Error::InvalidArgument(format!(
                "series '{}': training split ({} steps) is shorter than one window ({})",
                s.id, opt_len, cfg.window
            )));
        }
        fit_parts.push(s.values.slice_cols(0, opt_len));
        splits.push(opt_len);
    }
    let stats = fit_normalizer(&fit_parts.iter().collect::<Vec<_>>())?;
    let mut train_windows = Vec::new();
    let mut val_windows = Vec::new();
    let mut validation = Vec::new();
    // overlapping training windows expose the model to every phase
    // alignment a scoring window can have, not just multiples of the
    // window length
    let train_stride = (cfg.window / 8).max(1);
    for (s, &opt_len) in data.iter().zip(&splits) {
        let opt = normalize(&s.values.slice_cols(0, opt_len), &stats)?;
        let tail =
            normalize(&s.values.slice_cols(opt_len, s.values.cols() - opt_len), &stats)?;
        for w in crate::series::slice_windows(opt.cols(), cfg.window, train_stride)? {
            train_windows.push(opt.slice_cols(w.start, w.len));
        }
        for w in crate::series::slice_windows(tail.cols(), cfg.window, cfg.window)? {
            val_windows.push(tail.slice_cols(w.start, w.len));
        }
        validation.push(tail);
    }

    let mut model = ImputerModel::random(
        d, cfg.window, cfg.levels, cfg.kernel, cfg.hidden, cfg.head, cfg.seed,
    )?;
    model.stats = stats;
    let meta = model.meta.clone();
    let seq_set = if cfg.head == HeadKind::BidirectionalForecast {
        Some(make_sequence_masks(cfg.window, cfg.seq_masks)?)
    } else {
        None
    };
    // fixed validation masks keep epoch-to-epoch val losses comparable
    let val_point_sets: Vec<PointMaskSet> = if cfg.head == HeadKind::Reconstruction {
        (0..val_windows.len())
            .map(|i| make_point_masks(d, cfg.window, cfg.point_masks, derive_seed(cfg.seed, u64::MAX, i as u64)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut adam = Adam::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ImputerModel)> = None;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let (bound, slots) = model.bind(&mut tape);
            let head_ref = bind_head(&bound);
            let mut losses = Vec::with_capacity(chunk.len());
            for &widx in chunk {
                let w = &train_windows[widx];
                let point_set = if cfg.head == HeadKind::Reconstruction {
                    Some(make_point_masks(
                        d,
                        cfg.window,
                        cfg.point_masks,
                        derive_seed(cfg.seed, epoch as u64 + 1, widx as u64),
                    )?)
                } else {
                    None
                };
                let loss = build_window_loss(
                    &mut tape,
                    w,
                    w,
                    &head_ref,
                    &meta,
                    point_set.as_ref(),
                    seq_set.as_ref(),
                )?;
                losses.push(loss);
            }
            let total = losses
                .into_iter()
                .reduce(|a, b| tape.add(a, b))
                .expect("non-empty batch");
            let batch_loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let loss_val = tape.val(batch_loss).get(0, 0);
            if !loss_val.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss_val * chunk.len() as f64;
            let grads = tape.backward(batch_loss)?;
            let mut flat: Vec<Matrix> = Vec::with_capacity(slots.len());
            let mut pi = 0;
            model.for_each_tensor(&mut |p| {
                let g = grads
                    .get(slots[pi])
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()));
                flat.push(g);
                pi += 1;
            });
            if flat.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence { epoch });
            }
            adam.step(&mut model, &mut flat, cfg);
        }
        let train_loss = epoch_loss / train_windows.len() as f64;

        // validation pass: forward only
        let mut val_loss = 0.0;
        for (i, w) in val_windows.iter().enumerate() {
            let mut tape = Tape::new();
            let (bound, _slots) = model.bind(&mut tape);
            let head_ref = bind_head(&bound);
            let loss = build_window_loss(
                &mut tape,
                w,
                w,
                &head_ref,
                &meta,
                val_point_sets.get(i),
                seq_set.as_ref(),
            )?;
            val_loss += tape.val(loss).get(0, 0);
        }
        val_loss /= val_windows.len().max(1) as f64;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(EpochStats { epoch, train_loss, val_loss });
        let better = match &best {
            None => true,
            Some((_, b, _)) => val_loss < *b,
        };
        if better {
            best = Some((epoch, val_loss, model.clone()));
        }
    }
    let (best_epoch, _, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model: best_model, history, best_epoch, validation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::TimeSeries;

    fn sine_series(t: usize, period: f64, amp: f64, id: &str) -> TimeSeries {
        let row: Vec<f64> = (0..t)
            .map(|i| amp * (2.0 * std::f64::consts::PI * i as f64 / period).sin())
            .collect();
        TimeSeries::new(id, Matrix::from_rows(&[row]).unwrap())
    }

    fn tiny_cfg(head: HeadKind) -> TrainConfig {
        TrainConfig {
            window: 8,
            levels: 1,
            kernel: 3,
            hidden: 1,
            point_masks: 2,
            seq_masks: 2,
            epochs: 3,
            batch: 4,
            lr: 1e-3,
            val_fraction: 0.2,
            seed: 7,
            head,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_matches_hand_computation() {
        // x = [0, 0], xhat = [1, 3]: (1 + 3) / 2 = 2
        let x = Matrix::from_slice(&[0.0, 0.0]);
        let xhat = Matrix::from_slice(&[1.0, 3.0]);
        assert_eq!(reconstruction_loss(&x, &xhat).unwrap(), 2.0);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let x = Matrix::from_slice(&[0.0, 0.0]);
        let y = Matrix::from_slice(&[0.0, 0.0, 0.0]);
        assert!(matches!(
            reconstruction_loss(&x, &y),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let x = Matrix::from_slice(&[1.5, -2.0, 0.25]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
    }

    fn fd_check(head: HeadKind) {
        // tiny model so every parameter can be probed by finite differences
        let data = vec![sine_series(50, 9.0, 1.0, "fd")];
        let cfg = tiny_cfg(head);
        let mut model =
            ImputerModel::random(1, cfg.window, cfg.levels, cfg.kernel, cfg.hidden, head, 11)
                .unwrap();
        let window = {
            let mut m = Matrix::zeros(1, 8);
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v = data[0].values.get(0, i);
            }
            m
        };
        // offset target keeps the L1 loss away from its kinks
        let mut target = window.clone();
        for v in target.data_mut() {
            *v += 3.0;
        }
        let point_set = make_point_masks(1, 8, 2, 5).unwrap();
        let seq_set = make_sequence_masks(8, 2).unwrap();

        let loss_value = |m: &ImputerModel| -> f64 {
            let mut tape = Tape::new();
            let (bound, _) = m.bind(&mut tape);
            let head_ref = bind_head(&bound);
            let l = build_window_loss(
                &mut tape,
                &window,
                &target,
                &head_ref,
                &m.meta,
                Some(&point_set),
                Some(&seq_set),
            )
            .unwrap();
            tape.val(l).get(0, 0)
        };

        let mut tape = Tape::new();
        let (bound, slots) = model.bind(&mut tape);
        let head_ref = bind_head(&bound);
        let meta = model.meta.clone();
        let loss = build_window_loss(
            &mut tape,
            &window,
            &target,
            &head_ref,
            &meta,
            Some(&point_set),
            Some(&seq_set),
        )
        .unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic: Vec<Matrix> = Vec::new();
        let mut pi = 0;
        model.for_each_tensor(&mut |p| {
            analytic.push(
                grads
                    .get(slots[pi])
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())),
            );
            pi += 1;
        });

        let eps = 1e-5;
        let shapes: Vec<usize> = analytic.iter().map(|g| g.data().len()).collect();
        let mut worst = 0.0f64;
        for (ti, &len) in shapes.iter().enumerate() {
            for k in 0..len {
                let nudge = |m: &mut ImputerModel, delta: f64| {
                    let mut idx = 0;
                    m.for_each_tensor_mut(&mut |p| {
                        if idx == ti {
                            p.data_mut()[k] += delta;
                        }
                        idx += 1;
                    });
                };
                nudge(&mut model, eps);
                let up = loss_value(&model);
                nudge(&mut model, -2.0 * eps);
                let down = loss_value(&model);
                nudge(&mut model, eps);
                let fd = (up - down) / (2.0 * eps);
                let ad = analytic[ti].data()[k];
                let rel = (ad - fd).abs() / fd.abs().max(1e-8);
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "tensor {ti} cell {k}: analytic {ad} vs fd {fd} (rel {rel})"
                );
            }
        }
        // the probe must actually exercise nonzero gradients
        assert!(analytic.iter().any(|g| g.data().iter().any(|v| v.abs() > 1e-6)));
        let _ = worst;
    }

    #[test]
    fn reconstruction_gradients_match_finite_differences() {
        fd_check(HeadKind::Reconstruction);
    }

    #[test]
    fn forecast_gradients_match_finite_differences() {
        fd_check(HeadKind::BidirectionalForecast);
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![sine_series(60, 11.0, 1.0, "det")];
        let cfg = tiny_cfg(HeadKind::Reconstruction);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn zero_learning_rate_freezes_the_model() {
        let data = vec![sine_series(60, 11.0, 1.0, "frozen")];
        let mut cfg = tiny_cfg(HeadKind::Reconstruction);
        cfg.lr = 0.0;
        let out = train(&data, &cfg).unwrap();
        let mut fresh = ImputerModel::random(
            1, cfg.window, cfg.levels, cfg.kernel, cfg.hidden, cfg.head, cfg.seed,
        )
        .unwrap();
        fresh.stats = out.model.stats.clone();
        assert_eq!(out.model, fresh);
        // with frozen parameters every epoch sees the same validation loss
        let first = out.history[0].val_loss;
        assert!(out.history.iter().all(|e| e.val_loss == first));
    }

    #[test]
    fn training_reduces_the_loss() {
        let data = vec![sine_series(120, 16.0, 1.0, "learn")];
        let mut cfg = tiny_cfg(HeadKind::Reconstruction);
        cfg.epochs = 15;
        cfg.lr = 5e-3;
        let out = train(&data, &cfg).unwrap();
        assert!(
            out.history.last().unwrap().train_loss < out.history[0].train_loss,
            "loss failed to decrease: {:?}",
            out.history
        );
    }

    #[test]
    fn best_epoch_matches_the_history_minimum() {
        let data = vec![sine_series(100, 13.0, 1.0, "best")];
        let mut cfg = tiny_cfg(HeadKind::BidirectionalForecast);
        cfg.epochs = 6;
        let out = train(&data, &cfg).unwrap();
        let argmin = out
            .history
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.val_loss.partial_cmp(&b.1.val_loss).unwrap())
            .unwrap()
            .0;
        assert_eq!(out.best_epoch, out.history[argmin].epoch);
        assert_eq!(out.best_epoch, argmin);
    }

    #[test]
    fn validation_tail_is_returned_per_series() {
        let data = vec![
            sine_series(60, 11.0, 1.0, "a"),
            sine_series(45, 7.0, 2.0, "b"),
        ];
        let cfg = tiny_cfg(HeadKind::Reconstruction);
        let out = train(&data, &cfg).unwrap();
        assert_eq!(out.validation.len(), 2);
        assert_eq!(out.validation[0].cols(), 12); // floor(60 * 0.2)
        assert_eq!(out.validation[1].cols(), 9); // floor(45 * 0.2)
    }

    #[test]
    fn short_validation_split_is_rejected() {
        let data = vec![sine_series(30, 11.0, 1.0, "short")];
        let cfg = tiny_cfg(HeadKind::Reconstruction); // floor(30 * 0.2) = 6 < 8
        assert!(matches!(train(&data, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny_cfg(HeadKind::Reconstruction);
        assert!(matches!(train(&[], &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn trained_point_imputer_fills_a_clean_sine() {
        // noiseless sine: after brief training, masked points should land
        // close to the curve in normalized space
        let data = vec![sine_series(260, 24.0, 1.0, "sine")];
        let cfg = TrainConfig {
            window: 16,
            levels: 2,
            kernel: 3,
            hidden: 2,
            point_masks: 4,
            epochs: 40,
            batch: 8,
            lr: 5e-3,
            val_fraction: 0.2,
            seed: 3,
            head: HeadKind::Reconstruction,
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg).unwrap();
        let model = out.model;
        // impute a validation window and compare to the truth
        let window = out.validation[0].slice_cols(0, 16);
        let set = make_point_masks(1, 16, 4, 123).unwrap();
        let samples = crate::masking::materialize_point_samples(&window, &set).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for s in &samples {
            let res = model.impute_points(s).unwrap();
            let cells = match &s.mask {
                crate::masking::MaskSpec::Cells(c) => c.clone(),
                _ => unreachable!(),
            };
            for (&cell, truth) in cells.iter().zip(&s.target) {
                total += (res.imputed.data()[cell] - truth).abs();
                count += 1;
            }
        }
        let mean_err = total / count as f64;
        assert!(mean_err < 0.2, "mean imputation error too high: {mean_err}");
    }
}
