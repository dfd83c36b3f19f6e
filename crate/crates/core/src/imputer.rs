//! Convolutional self-imputation models.
//!
//! The backbone is a binary tree of split-interact blocks: each block splits
//! its input into even/odd timestep halves, modulates each half by the
//! exponential of a convolution of the other, then additively corrects each
//! half with a second convolution of the modulated opposite half. Leaves are
//! reversed-interleaved back to the original ordering, a residual adds the
//! input, and an affine decoder over the time axis maps to the output.
//!
//! Two heads share this backbone:
//! * reconstruction — fills randomly masked points of a window
//!   (output = input + decoded features);
//! * bidirectional forecast — two independent backbones predict a masked
//!   contiguous segment from the left context (forward in time) and from the
//!   reversed right context (backward in time); the two forecasts are
//!   blended linearly by proximity to their context edge.
//!
//! All forward passes run through the autodiff [`Tape`], so training and
//! inference share one implementation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{MaskSpec, MaskedSample};
use crate::series::{Matrix, NormalizationStats};
use crate::tape::{SlotId, Tape};

/// Which self-imputation task a model solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Point-mask reconstruction.
    Reconstruction,
    /// Contiguous-segment bidirectional forecasting.
    BidirectionalForecast,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Reconstruction => write!(f, "reconstruction"),
            HeadKind::BidirectionalForecast => write!(f, "bidirectional-forecast"),
        }
    }
}

/// Two-layer convolution bank: conv (d -> h*d) -> silu -> conv (h*d -> d),
/// both with edge-replication padding so the length is preserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBank {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ConvBank {
    fn zeroed(d: usize, kernel: usize, hidden: usize) -> Self {
        ConvBank {
            w1: Matrix::zeros(hidden * d, d * kernel),
            b1: Matrix::zeros(1, hidden * d),
            w2: Matrix::zeros(d, hidden * d * kernel),
            b2: Matrix::zeros(1, d),
        }
    }

    fn random(d: usize, kernel: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut bank = ConvBank::zeroed(d, kernel, hidden);
        fill_normal(&mut bank.w1, (1.0 / (d * kernel) as f64).sqrt(), rng);
        // half-scale second layer keeps the exponential modulation tame at init
        fill_normal(&mut bank.w2, 0.5 * (1.0 / (hidden * d * kernel) as f64).sqrt(), rng);
        bank
    }

    fn for_each(&self, f: &mut impl FnMut(&Matrix)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    fn for_each_mut(&mut self, f: &mut impl FnMut(&mut Matrix)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

/// One split-interact block: four convolution banks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractBlock {
    /// Modulates the even half (applied to the odd half).
    pub mod_even: ConvBank,
    /// Modulates the odd half (applied to the even half).
    pub mod_odd: ConvBank,
    /// Additive correction for the even half.
    pub corr_even: ConvBank,
    /// Additive correction for the odd half.
    pub corr_odd: ConvBank,
}

impl InteractBlock {
    fn zeroed(d: usize, kernel: usize, hidden: usize) -> Self {
        InteractBlock {
            mod_even: ConvBank::zeroed(d, kernel, hidden),
            mod_odd: ConvBank::zeroed(d, kernel, hidden),
            corr_even: ConvBank::zeroed(d, kernel, hidden),
            corr_odd: ConvBank::zeroed(d, kernel, hidden),
        }
    }

    fn random(d: usize, kernel: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        InteractBlock {
            mod_even: ConvBank::random(d, kernel, hidden, rng),
            mod_odd: ConvBank::random(d, kernel, hidden, rng),
            corr_even: ConvBank::random(d, kernel, hidden, rng),
            corr_odd: ConvBank::random(d, kernel, hidden, rng),
        }
    }

    fn for_each(&self, f: &mut impl FnMut(&Matrix)) {
        self.mod_even.for_each(f);
        self.mod_odd.for_each(f);
        self.corr_even.for_each(f);
        self.corr_odd.for_each(f);
    }

    fn for_each_mut(&mut self, f: &mut impl FnMut(&mut Matrix)) {
        self.mod_even.for_each_mut(f);
        self.mod_odd.for_each_mut(f);
        self.corr_even.for_each_mut(f);
        self.corr_odd.for_each_mut(f);
    }
}

/// Backbone: `2^levels - 1` blocks in heap order (children of `i` at
/// `2i+1`, `2i+2`) plus a time-axis affine decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreNet {
    pub d: usize,
    pub levels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub blocks: Vec<InteractBlock>,
    /// (n, n) decoder weights over the time axis, shared across variates.
    pub dec_w: Matrix,
    pub dec_b: Matrix,
}

impl CoreNet {
    pub fn zeroed(d: usize, n: usize, levels: usize, kernel: usize, hidden: usize) -> Self {
        let blocks = (0..(1usize << levels) - 1)
            .map(|_| InteractBlock::zeroed(d, kernel, hidden))
            .collect();
        CoreNet {
            d,
            levels,
            kernel,
            hidden,
            blocks,
            dec_w: Matrix::zeros(n, n),
            dec_b: Matrix::zeros(1, n),
        }
    }

    fn random(
        d: usize,
        n: usize,
        levels: usize,
        kernel: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut net = CoreNet::zeroed(d, n, levels, kernel, hidden);
        for b in net.blocks.iter_mut() {
            *b = InteractBlock::random(d, kernel, hidden, rng);
        }
        fill_normal(&mut net.dec_w, 0.3 / (n as f64).sqrt(), rng);
        net
    }

    /// Expected input width (the decoder size).
    pub fn width(&self) -> usize {
        self.dec_w.cols()
    }

    /// Same-length forward map: `x + decode(realign(tree(x)) + x)`.
    /// With all parameters zero this is the identity (residual path).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xin = tape.input(x.clone());
        let bound = self.bind(&mut tape);
        let out = recon_forward(&mut tape, xin, &bound);
        Ok(tape.val(out).clone())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() == 0 {
            return Err(Error::EmptyInput("empty window"));
        }
        let div = 1usize << self.levels;
        if x.cols() % div != 0 {
            return Err(Error::LengthNotDivisible { len: x.cols(), divisor: div });
        }
        if x.rows() != self.d || x.cols() != self.width() {
            return Err(Error::DimensionMismatch(format!(
                "expected {}x{} input, found {}x{}",
                self.d,
                self.width(),
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> BoundCore {
        let mut slots = Vec::new();
        self.for_each(&mut |m: &Matrix| slots.push(tape.param(m.clone())));
        BoundCore::from_slots(self, &slots)
    }

    pub fn for_each(&self, f: &mut impl FnMut(&Matrix)) {
        for b in &self.blocks {
            b.for_each(f);
        }
        f(&self.dec_w);
        f(&self.dec_b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut Matrix)) {
        for b in &mut self.blocks {
            b.for_each_mut(f);
        }
        f(&mut self.dec_w);
        f(&mut self.dec_b);
    }
}

fn fill_normal(m: &mut Matrix, std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("positive std");
    for v in m.data_mut() {
        *v = dist.sample(rng);
    }
}

/// Tape-bound convolution bank.
#[derive(Clone, Copy)]
pub(crate) struct BoundBank {
    w1: SlotId,
    b1: SlotId,
    w2: SlotId,
    b2: SlotId,
}

#[derive(Clone, Copy)]
pub(crate) struct BoundBlock {
    mod_even: BoundBank,
    mod_odd: BoundBank,
    corr_even: BoundBank,
    corr_odd: BoundBank,
}

/// Tape-bound backbone, mirroring [`CoreNet`].
pub(crate) struct BoundCore {
    pub levels: usize,
    pub kernel: usize,
    pub blocks: Vec<BoundBlock>,
    pub dec_w: SlotId,
    pub dec_b: SlotId,
}

impl BoundCore {
    fn from_slots(net: &CoreNet, slots: &[SlotId]) -> BoundCore {
        // slot layout mirrors CoreNet::for_each: 16 per block, then decoder
        let mut it = slots.iter().copied();
        let mut next = || it.next().expect("slot layout mismatch");
        let bank = |n: &mut dyn FnMut() -> SlotId| BoundBank {
            w1: n(),
            b1: n(),
            w2: n(),
            b2: n(),
        };
        let blocks = (0..net.blocks.len())
            .map(|_| BoundBlock {
                mod_even: bank(&mut next),
                mod_odd: bank(&mut next),
                corr_even: bank(&mut next),
                corr_odd: bank(&mut next),
            })
            .collect();
        BoundCore {
            levels: net.levels,
            kernel: net.kernel,
            blocks,
            dec_w: next(),
            dec_b: next(),
        }
    }
}

fn bank_forward(tape: &mut Tape, x: SlotId, bank: &BoundBank, kernel: usize) -> SlotId {
    let pad = (kernel - 1) / 2;
    let p1 = tape.pad_replicate(x, pad, pad);
    let c1 = tape.conv1d(p1, bank.w1, bank.b1, kernel);
    let s = tape.silu(c1);
    let p2 = tape.pad_replicate(s, pad, pad);
    tape.conv1d(p2, bank.w2, bank.b2, kernel)
}

/// Split-interact step; input width must be even.
pub(crate) fn block_forward(
    tape: &mut Tape,
    x: SlotId,
    block: &BoundBlock,
    kernel: usize,
) -> (SlotId, SlotId) {
    let n = tape.val(x).cols();
    debug_assert_eq!(n % 2, 0, "block input must have even length");
    let evens: Vec<usize> = (0..n).step_by(2).collect();
    let odds: Vec<usize> = (1..n).step_by(2).collect();
    let xe = tape.gather_cols(x, evens);
    let xo = tape.gather_cols(x, odds);
    // cross-modulation by the exponential of the opposite branch
    let ge = bank_forward(tape, xo, &block.mod_even, kernel);
    let ee = tape.exp(ge);
    let e_mod = tape.mul(xe, ee);
    let go = bank_forward(tape, xe, &block.mod_odd, kernel);
    let eo = tape.exp(go);
    let o_mod = tape.mul(xo, eo);
    // additive correction from the modulated opposite branch
    let ce = bank_forward(tape, o_mod, &block.corr_even, kernel);
    let e_out = tape.add(e_mod, ce);
    let co = bank_forward(tape, e_mod, &block.corr_odd, kernel);
    let o_out = tape.add(o_mod, co);
    (e_out, o_out)
}

/// Recursive tree of blocks; leaves are interleaved back into original
/// temporal order (even results to even positions, odd to odd).
fn tree_forward(tape: &mut Tape, x: SlotId, core: &BoundCore, node: usize, level: usize) -> SlotId {
    let n = tape.val(x).cols();
    let (e, o) = block_forward(tape, x, &core.blocks[node], core.kernel);
    let (le, lo) = if level + 1 == core.levels {
        (e, o)
    } else {
        (
            tree_forward(tape, e, core, 2 * node + 1, level + 1),
            tree_forward(tape, o, core, 2 * node + 2, level + 1),
        )
    };
    let evens: Vec<usize> = (0..n).step_by(2).collect();
    let odds: Vec<usize> = (1..n).step_by(2).collect();
    let se = tape.scatter_cols(le, evens, n);
    let so = tape.scatter_cols(lo, odds, n);
    tape.add(se, so)
}

/// Features: realigned tree output plus the input residual.
pub(crate) fn core_features(tape: &mut Tape, x: SlotId, core: &BoundCore) -> SlotId {
    let t = tree_forward(tape, x, core, 0, 0);
    tape.add(t, x)
}

/// Same-length head: input + decoded features.
pub(crate) fn recon_forward(tape: &mut Tape, x: SlotId, core: &BoundCore) -> SlotId {
    let f = core_features(tape, x, core);
    let dec = tape.time_linear(f, core.dec_w, core.dec_b);
    tape.add(x, dec)
}

/// Forecast head: decoded features without the closing residual; row `j` of
/// the output is the prediction `j+1` steps past the context end.
pub(crate) fn horizon_forward(tape: &mut Tape, ctx: SlotId, core: &BoundCore) -> SlotId {
    let f = core_features(tape, ctx, core);
    tape.time_linear(f, core.dec_w, core.dec_b)
}

/// Standalone split-interact application (validated, for inspection/tests).
pub fn split_interact(
    block: &InteractBlock,
    x: &Matrix,
    kernel: usize,
) -> Result<(Matrix, Matrix)> {
    if x.cols() == 0 {
        return Err(Error::EmptyInput("empty block input"));
    }
    if x.cols() % 2 != 0 {
        return Err(Error::LengthNotDivisible { len: x.cols(), divisor: 2 });
    }
    let mut tape = Tape::new();
    let xin = tape.input(x.clone());
    let mut slots = Vec::new();
    block.for_each(&mut |m: &Matrix| slots.push(tape.param(m.clone())));
    let mut it = slots.into_iter();
    let mut next = || it.next().expect("slot layout mismatch");
    let bank = |n: &mut dyn FnMut() -> SlotId| BoundBank {
        w1: n(),
        b1: n(),
        w2: n(),
        b2: n(),
    };
    let bound = BoundBlock {
        mod_even: bank(&mut next),
        mod_odd: bank(&mut next),
        corr_even: bank(&mut next),
        corr_odd: bank(&mut next),
    };
    let (e, o) = block_forward(&mut tape, xin, &bound, kernel);
    Ok((tape.val(e).clone(), tape.val(o).clone()))
}

/// Model hyper-parameters and shape bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub d: usize,
    /// Nominal window length the model was built for.
    pub window: usize,
    /// Window length after padding up to a multiple of `2^levels`; the
    /// decoder is sized to this.
    pub padded: usize,
    pub levels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub head: HeadKind,
}

/// Head-specific parameter sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadParams {
    Reconstruction(CoreNet),
    Bidirectional { forward: CoreNet, backward: CoreNet },
}

/// A trained (or trainable) imputation model, including the normalization
/// it expects its inputs in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputerModel {
    pub meta: ModelMeta,
    pub head: HeadParams,
    pub stats: NormalizationStats,
}

/// Where an output value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Imputed,
}

/// A fully assembled window: imputed values at masked positions, originals
/// everywhere else, with per-cell provenance (flat `v * t + i` order).
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    pub imputed: Matrix,
    pub provenance: Vec<Provenance>,
}

impl ImputationResult {
    pub fn imputed_cell_count(&self) -> usize {
        self.provenance.iter().filter(|p| **p == Provenance::Imputed).count()
    }
}

pub(crate) enum BoundHead {
    Recon(BoundCore),
    Bidi { forward: BoundCore, backward: BoundCore },
}

impl ImputerModel {
    /// Randomly initialized model. `window` is padded up to a multiple of
    /// `2^levels` internally; the kernel size must be odd.
    pub fn random(
        d: usize,
        window: usize,
        levels: usize,
        kernel: usize,
        hidden: usize,
        head: HeadKind,
        seed: u64,
    ) -> Result<Self> {
        let meta = Self::make_meta(d, window, levels, kernel, hidden, head)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = meta.padded;
        let head = match head {
            HeadKind::Reconstruction => {
                HeadParams::Reconstruction(CoreNet::random(d, p, levels, kernel, hidden, &mut rng))
            }
            HeadKind::BidirectionalForecast => HeadParams::Bidirectional {
                forward: CoreNet::random(d, p, levels, kernel, hidden, &mut rng),
                backward: CoreNet::random(d, p, levels, kernel, hidden, &mut rng),
            },
        };
        Ok(ImputerModel { meta, head, stats: NormalizationStats::identity(d) })
    }

    /// All-zero model (identity reconstruction); mainly for tests.
    pub fn zeroed(
        d: usize,
        window: usize,
        levels: usize,
        kernel: usize,
        hidden: usize,
        head: HeadKind,
    ) -> Result<Self> {
        let meta = Self::make_meta(d, window, levels, kernel, hidden, head)?;
        let p = meta.padded;
        let head = match head {
            HeadKind::Reconstruction => {
                HeadParams::Reconstruction(CoreNet::zeroed(d, p, levels, kernel, hidden))
            }
            HeadKind::BidirectionalForecast => HeadParams::Bidirectional {
                forward: CoreNet::zeroed(d, p, levels, kernel, hidden),
                backward: CoreNet::zeroed(d, p, levels, kernel, hidden),
            },
        };
        Ok(ImputerModel { meta, head, stats: NormalizationStats::identity(d) })
    }

    fn make_meta(
        d: usize,
        window: usize,
        levels: usize,
        kernel: usize,
        hidden: usize,
        head: HeadKind,
    ) -> Result<ModelMeta> {
        if d == 0 || window == 0 || hidden == 0 {
            return Err(Error::InvalidArgument(
                "variates, window and hidden multiplier must be positive".into(),
            ));
        }
        if levels == 0 || levels > 6 {
            return Err(Error::InvalidArgument("levels must be in 1..=6".into()));
        }
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        let div = 1usize << levels;
        let padded = window.div_ceil(div) * div;
        Ok(ModelMeta { d, window, padded, levels, kernel, hidden, head })
    }

    pub fn head_kind(&self) -> HeadKind {
        self.meta.head
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |m| n += m.data().len());
        n
    }

    /// Visits every parameter tensor in a fixed, documented order:
    /// reconstruction core, or forward then backward core; within a core,
    /// blocks in heap order (banks: mod_even, mod_odd, corr_even, corr_odd;
    /// tensors: w1, b1, w2, b2), then decoder weights and bias.
    pub fn for_each_tensor(&self, f: &mut impl FnMut(&Matrix)) {
        match &self.head {
            HeadParams::Reconstruction(core) => core.for_each(f),
            HeadParams::Bidirectional { forward, backward } => {
                forward.for_each(f);
                backward.for_each(f);
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(&mut Matrix)) {
        match &mut self.head {
            HeadParams::Reconstruction(core) => core.for_each_mut(f),
            HeadParams::Bidirectional { forward, backward } => {
                forward.for_each_mut(f);
                backward.for_each_mut(f);
            }
        }
    }

    /// Binds all parameters onto a tape; the flat slot list follows
    /// [`ImputerModel::for_each_tensor`] order.
    pub(crate) fn bind(&self, tape: &mut Tape) -> (BoundHead, Vec<SlotId>) {
        let mut slots = Vec::new();
        self.for_each_tensor(&mut |m| slots.push(tape.param(m.clone())));
        let head = match &self.head {
            HeadParams::Reconstruction(core) => {
                BoundHead::Recon(BoundCore::from_slots(core, &slots))
            }
            HeadParams::Bidirectional { forward, backward } => {
                let per_core = slots.len() / 2;
                BoundHead::Bidi {
                    forward: BoundCore::from_slots(forward, &slots[..per_core]),
                    backward: BoundCore::from_slots(backward, &slots[per_core..]),
                }
            }
        };
        (head, slots)
    }

    fn check_window(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.meta.d || x.cols() != self.meta.window {
            return Err(Error::DimensionMismatch(format!(
                "model expects {}x{} windows, found {}x{}",
                self.meta.d,
                self.meta.window,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Reconstruction-head forward over a full (sentinel-filled) window.
    pub fn reconstruct_window(&self, masked: &Matrix) -> Result<Matrix> {
        let HeadParams::Reconstruction(core) = &self.head else {
            return Err(Error::HeadMismatch {
                expected: HeadKind::Reconstruction.to_string(),
                found: self.head_kind().to_string(),
            });
        };
        self.check_window(masked)?;
        let mut tape = Tape::new();
        let xin = tape.input(masked.clone());
        let bound = core.bind(&mut tape);
        let out = build_recon_window(&mut tape, xin, &bound, &self.meta);
        Ok(tape.val(out).clone())
    }

    /// Fills the masked points of a sample from its context.
    pub fn impute_points(&self, sample: &MaskedSample) -> Result<ImputationResult> {
        let MaskSpec::Cells(cells) = &sample.mask else {
            return Err(Error::InvalidArgument(
                "impute_points requires a point mask".into(),
            ));
        };
        let out = self.reconstruct_window(&sample.input)?;
        let mut imputed = sample.input.clone();
        let mut provenance = vec![Provenance::Original; imputed.data().len()];
        for &cell in cells {
            imputed.data_mut()[cell] = out.data()[cell];
            provenance[cell] = Provenance::Imputed;
        }
        Ok(ImputationResult { imputed, provenance })
    }

    /// Fills a masked contiguous segment by bidirectional forecasting.
    pub fn impute_sequence(&self, sample: &MaskedSample) -> Result<ImputationResult> {
        let MaskSpec::Segment { start, end } = sample.mask else {
            return Err(Error::InvalidArgument(
                "impute_sequence requires a segment mask".into(),
            ));
        };
        let HeadParams::Bidirectional { forward, backward } = &self.head else {
            return Err(Error::HeadMismatch {
                expected: HeadKind::BidirectionalForecast.to_string(),
                found: self.head_kind().to_string(),
            });
        };
        self.check_window(&sample.input)?;
        let mut tape = Tape::new();
        let xin = tape.input(sample.input.clone());
        let bf = forward.bind(&mut tape);
        let bb = backward.bind(&mut tape);
        let seg = build_segment_imputation(&mut tape, xin, start, end, &bf, &bb, &self.meta)?;
        let seg_vals = tape.val(seg).clone();
        let mut imputed = sample.input.clone();
        let mut provenance = vec![Provenance::Original; imputed.data().len()];
        for v in 0..self.meta.d {
            for (j, i) in (start..=end).enumerate() {
                imputed.set(v, i, seg_vals.get(v, j));
                provenance[v * self.meta.window + i] = Provenance::Imputed;
            }
        }
        Ok(ImputationResult { imputed, provenance })
    }

    /// One directional forecast of a segment (test/inspection hook).
    #[cfg(test)]
    pub(crate) fn directional_forecast(
        &self,
        window: &Matrix,
        start: usize,
        end: usize,
        forward_dir: bool,
    ) -> Result<Matrix> {
        let HeadParams::Bidirectional { forward, backward } = &self.head else {
            return Err(Error::HeadMismatch {
                expected: HeadKind::BidirectionalForecast.to_string(),
                found: self.head_kind().to_string(),
            });
        };
        self.check_window(window)?;
        let mut tape = Tape::new();
        let xin = tape.input(window.clone());
        let slot = if forward_dir {
            let b = forward.bind(&mut tape);
            forecast_forward_dir(&mut tape, xin, start, end, &b, &self.meta)
        } else {
            let b = backward.bind(&mut tape);
            forecast_backward_dir(&mut tape, xin, start, end, &b, &self.meta)
        }?;
        Ok(tape.val(slot).clone())
    }
}

/// Pads a (d, window) slot to the decoder width, applies the reconstruction
/// head and strips the padding again.
pub(crate) fn build_recon_window(
    tape: &mut Tape,
    window: SlotId,
    core: &BoundCore,
    meta: &ModelMeta,
) -> SlotId {
    let pad = meta.padded - meta.window;
    let x = if pad > 0 { tape.pad_replicate(window, 0, pad) } else { window };
    let y = recon_forward(tape, x, core);
    if pad > 0 {
        tape.gather_cols(y, (0..meta.window).collect())
    } else {
        y
    }
}

/// Forward-direction forecast of segment `[start, end]` from the left
/// context, as a (d, len) slot.
fn forecast_forward_dir(
    tape: &mut Tape,
    window: SlotId,
    start: usize,
    end: usize,
    core: &BoundCore,
    meta: &ModelMeta,
) -> Result<SlotId> {
    if start == 0 {
        return Err(Error::NoContext);
    }
    let g = end - start + 1;
    let ctx = tape.gather_cols(window, (0..start).collect());
    let ctx_pad = tape.pad_replicate(ctx, meta.padded - start, 0);
    let f = horizon_forward(tape, ctx_pad, core);
    Ok(tape.gather_cols(f, (0..g).collect()))
}

/// Backward-direction forecast of segment `[start, end]` from the reversed
/// right context, returned in forward temporal order.
fn forecast_backward_dir(
    tape: &mut Tape,
    window: SlotId,
    start: usize,
    end: usize,
    core: &BoundCore,
    meta: &ModelMeta,
) -> Result<SlotId> {
    let w = meta.window;
    if end + 1 >= w {
        return Err(Error::NoContext);
    }
    let g = end - start + 1;
    let right = w - end - 1;
    let rev: Vec<usize> = (end + 1..w).rev().collect();
    let ctx = tape.gather_cols(window, rev);
    let ctx_pad = tape.pad_replicate(ctx, meta.padded - right, 0);
    let f = horizon_forward(tape, ctx_pad, core);
    // forecast position p (reversed time) is element end - p; emit forward order
    Ok(tape.gather_cols(f, (0..g).rev().collect()))
}

/// Blended bidirectional imputation of segment `[start, end]` of a window.
/// One-sided segments fall back to the available direction; a segment
/// covering the whole window has no context and errors.
pub(crate) fn build_segment_imputation(
    tape: &mut Tape,
    window: SlotId,
    start: usize,
    end: usize,
    fwd: &BoundCore,
    bwd: &BoundCore,
    meta: &ModelMeta,
) -> Result<SlotId> {
    let w = meta.window;
    if start == 0 && end + 1 >= w {
        return Err(Error::NoContext);
    }
    let g = end - start + 1;
    let has_left = start > 0;
    let has_right = end + 1 < w;
    match (has_left, has_right) {
        (true, false) => forecast_forward_dir(tape, window, start, end, fwd, meta),
        (false, true) => forecast_backward_dir(tape, window, start, end, bwd, meta),
        (true, true) => {
            let ff = forecast_forward_dir(tape, window, start, end, fwd, meta)?;
            let fb = forecast_backward_dir(tape, window, start, end, bwd, meta)?;
            // linear proximity blend: position p gets forward weight
            // (g - p) / (g + 1), backward weight (p + 1) / (g + 1)
            let mut wf = Matrix::zeros(meta.d, g);
            let mut wb = Matrix::zeros(meta.d, g);
            for v in 0..meta.d {
                for p in 0..g {
                    wf.set(v, p, (g - p) as f64 / (g + 1) as f64);
                    wb.set(v, p, (p + 1) as f64 / (g + 1) as f64);
                }
            }
            let wfs = tape.input(wf);
            let wbs = tape.input(wb);
            let tf = tape.mul(ff, wfs);
            let tb = tape.mul(fb, wbs);
            Ok(tape.add(tf, tb))
        }
        (false, false) => unreachable!("covered by the no-context check"),
    }
}
