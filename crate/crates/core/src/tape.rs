//! Tape-based reverse-mode automatic differentiation over small dense
//! tensors ([`Matrix`] values).
//!
//! The tape records primitive operations eagerly: each call computes the
//! forward value and appends a node. [`Tape::backward`] seeds the scalar
//! output with 1 and walks the nodes in reverse, accumulating adjoints in a
//! fixed order, so gradients are deterministic. [`Tape::replay`] re-executes
//! the recorded program from the leaves and must reproduce every value
//! bit-exactly.
//!
//! The absolute-value derivative at 0 is defined as 0 (L1 subgradient
//! convention used by the loss).

use crate::error::{Error, Result};
use crate::series::Matrix;

/// Handle to a value slot on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf holding data; no gradient flows past it.
    Input,
    /// Leaf holding a trainable tensor; gradients are collected here.
    Param,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Silu(usize),
    Abs(usize),
    /// Edge-replication padding along the time axis: (input, left, right).
    PadReplicate(usize, usize, usize),
    /// Valid 1-D convolution: x (in_c, n), w (out_c, in_c*k), b (1, out_c).
    Conv1d { x: usize, w: usize, b: usize, k: usize },
    /// Affine map over the time axis shared across channels:
    /// x (c, n_in), w (n_out, n_in), b (1, n_out) -> (c, n_out).
    TimeLinear { x: usize, w: usize, b: usize },
    /// Column gather: out[:, j] = x[:, idx[j]].
    GatherCols(usize, Vec<usize>),
    /// Additive column scatter into a zero matrix of width `out_len`.
    ScatterCols { x: usize, idx: Vec<usize>, out_len: usize },
    /// Flat-cell gather into a (1, m) row.
    GatherCells(usize, Vec<usize>),
    /// Additive flat-cell scatter of a (1, m) row into a (d, t) zero matrix.
    ScatterCells { x: usize, cells: Vec<usize>, d: usize, t: usize },
    /// Sum of all entries -> (1, 1).
    SumAll(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    out: usize,
}

/// Gradients per slot after a backward pass. Slots the output does not
/// depend on hold `None`.
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the scalar output with respect to the slot value.
    pub fn get(&self, id: SlotId) -> Option<&Matrix> {
        self.adj[id.0].as_ref()
    }
}

/// Record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Matrix>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, val: Matrix) -> SlotId {
        let out = self.vals.len();
        self.vals.push(val);
        self.nodes.push(Node { op, out });
        SlotId(out)
    }

    /// Value currently held in a slot.
    pub fn val(&self, id: SlotId) -> &Matrix {
        &self.vals[id.0]
    }

    /// Registers a constant leaf.
    pub fn input(&mut self, value: Matrix) -> SlotId {
        self.push(Op::Input, value)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> SlotId {
        self.push(Op::Param, value)
    }

    fn zip(&mut self, a: SlotId, b: SlotId, f: impl Fn(f64, f64) -> f64, op: Op) -> SlotId {
        let (x, y) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(
            (x.rows(), x.cols()),
            (y.rows(), y.cols()),
            "elementwise op on mismatched shapes"
        );
        let mut out = x.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(y.data()) {
            *o = f(*o, v);
        }
        self.push(op, out)
    }

    pub fn add(&mut self, a: SlotId, b: SlotId) -> SlotId {
        self.zip(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: SlotId, b: SlotId) -> SlotId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: SlotId, b: SlotId) -> SlotId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn map(&mut self, a: SlotId, f: impl Fn(f64) -> f64, op: Op) -> SlotId {
        let mut out = self.vals[a.0].clone();
        for o in out.data_mut() {
            *o = f(*o);
        }
        self.push(op, out)
    }

    pub fn scale(&mut self, a: SlotId, c: f64) -> SlotId {
        self.map(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn exp(&mut self, a: SlotId) -> SlotId {
        self.map(a, f64::exp, Op::Exp(a.0))
    }

    /// Sigmoid-weighted linear unit `x * sigmoid(x)`.
    pub fn silu(&mut self, a: SlotId) -> SlotId {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a.0))
    }

    pub fn abs(&mut self, a: SlotId) -> SlotId {
        self.map(a, f64::abs, Op::Abs(a.0))
    }

    /// Pads the time axis by replicating the first/last column.
    pub fn pad_replicate(&mut self, a: SlotId, left: usize, right: usize) -> SlotId {
        let x = &self.vals[a.0];
        assert!(x.cols() > 0, "cannot pad an empty tensor");
        if left == 0 && right == 0 {
            // still recorded so replay stays a faithful transcript
            let out = x.clone();
            return self.push(Op::PadReplicate(a.0, 0, 0), out);
        }
        let (c, n) = (x.rows(), x.cols());
        let mut out = Matrix::zeros(c, n + left + right);
        for v in 0..c {
            for j in 0..left {
                out.set(v, j, x.get(v, 0));
            }
            for i in 0..n {
                out.set(v, left + i, x.get(v, i));
            }
            for j in 0..right {
                out.set(v, left + n + j, x.get(v, n - 1));
            }
        }
        self.push(Op::PadReplicate(a.0, left, right), out)
    }

    /// Valid 1-D convolution over the time axis.
    /// `w` is (out_c, in_c*k) with kernel taps contiguous per input channel,
    /// `b` is (1, out_c).
    pub fn conv1d(&mut self, x: SlotId, w: SlotId, b: SlotId, k: usize) -> SlotId {
        let out = conv1d_forward(&self.vals[x.0], &self.vals[w.0], &self.vals[b.0], k);
        self.push(Op::Conv1d { x: x.0, w: w.0, b: b.0, k }, out)
    }

    /// Affine map over the time axis, shared across channels.
    pub fn time_linear(&mut self, x: SlotId, w: SlotId, b: SlotId) -> SlotId {
        let out = time_linear_forward(&self.vals[x.0], &self.vals[w.0], &self.vals[b.0]);
        self.push(Op::TimeLinear { x: x.0, w: w.0, b: b.0 }, out)
    }

    /// Column gather; indices may repeat (e.g. reversal).
    pub fn gather_cols(&mut self, a: SlotId, idx: Vec<usize>) -> SlotId {
        let x = &self.vals[a.0];
        let mut out = Matrix::zeros(x.rows(), idx.len());
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < x.cols(), "gather index out of range");
            for v in 0..x.rows() {
                out.set(v, j, x.get(v, i));
            }
        }
        self.push(Op::GatherCols(a.0, idx), out)
    }

    /// Additive column scatter into a zero matrix of width `out_len`.
    pub fn scatter_cols(&mut self, a: SlotId, idx: Vec<usize>, out_len: usize) -> SlotId {
        let x = &self.vals[a.0];
        assert_eq!(x.cols(), idx.len(), "scatter index count mismatch");
        let mut out = Matrix::zeros(x.rows(), out_len);
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < out_len, "scatter index out of range");
            for v in 0..x.rows() {
                out.set(v, i, out.get(v, i) + x.get(v, j));
            }
        }
        self.push(Op::ScatterCols { x: a.0, idx, out_len }, out)
    }

    /// Gathers flat cells (`v * t + i`) into a (1, m) row.
    pub fn gather_cells(&mut self, a: SlotId, cells: Vec<usize>) -> SlotId {
        let x = &self.vals[a.0];
        let mut out = Matrix::zeros(1, cells.len());
        for (j, &cell) in cells.iter().enumerate() {
            assert!(cell < x.data().len(), "cell index out of range");
            out.data_mut()[j] = x.data()[cell];
        }
        self.push(Op::GatherCells(a.0, cells), out)
    }

    /// Scatters a (1, m) row into a zero (d, t) matrix at flat cells.
    pub fn scatter_cells(&mut self, a: SlotId, cells: Vec<usize>, d: usize, t: usize) -> SlotId {
        let x = &self.vals[a.0];
        assert_eq!(x.data().len(), cells.len(), "cell count mismatch");
        let mut out = Matrix::zeros(d, t);
        for (j, &cell) in cells.iter().enumerate() {
            assert!(cell < d * t, "cell index out of range");
            out.data_mut()[cell] += x.data()[j];
        }
        self.push(Op::ScatterCells { x: a.0, cells, d, t }, out)
    }

    /// Sum of all entries as a (1, 1) scalar slot.
    pub fn sum_all(&mut self, a: SlotId) -> SlotId {
        let s: f64 = self.vals[a.0].data().iter().sum();
        let mut out = Matrix::zeros(1, 1);
        out.data_mut()[0] = s;
        self.push(Op::SumAll(a.0), out)
    }

    /// Reverse-mode sweep from a scalar slot. Returns adjoints for every
    /// slot the output depends on.
    pub fn backward(&self, out: SlotId) -> Result<Gradients> {
        let o = &self.vals[out.0];
        if o.rows() != 1 || o.cols() != 1 {
            return Err(Error::NotScalar { d: o.rows(), t: o.cols() });
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.vals.len()).map(|_| None).collect();
        let mut seed = Matrix::zeros(1, 1);
        seed.data_mut()[0] = 1.0;
        adj[out.0] = Some(seed);
        for node in self.nodes.iter().rev() {
            let Some(g) = adj[node.out].clone() else {
                continue;
            };
            self.accumulate(&node.op, &g, &mut adj);
        }
        Ok(Gradients { adj })
    }

    fn accumulate(&self, op: &Op, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let mut acc = |slot: usize, shape: (usize, usize), f: &mut dyn FnMut(&mut Matrix)| {
            let entry = adj[slot].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
            f(entry);
        };
        match op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                for &s in &[*a, *b] {
                    let shape = (self.vals[s].rows(), self.vals[s].cols());
                    acc(s, shape, &mut |e| {
                        for (ev, gv) in e.data_mut().iter_mut().zip(g.data()) {
                            *ev += gv;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                let sa = (self.vals[*a].rows(), self.vals[*a].cols());
                acc(*a, sa, &mut |e| {
                    for (ev, gv) in e.data_mut().iter_mut().zip(g.data()) {
                        *ev += gv;
                    }
                });
                let sb = (self.vals[*b].rows(), self.vals[*b].cols());
                acc(*b, sb, &mut |e| {
                    for (ev, gv) in e.data_mut().iter_mut().zip(g.data()) {
                        *ev -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.vals[*a].clone(), self.vals[*b].clone());
                acc(*a, (va.rows(), va.cols()), &mut |e| {
                    for ((ev, gv), bv) in e.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *ev += gv * bv;
                    }
                });
                acc(*b, (vb.rows(), vb.cols()), &mut |e| {
                    for ((ev, gv), av) in e.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *ev += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let shape = (self.vals[*a].rows(), self.vals[*a].cols());
                acc(*a, shape, &mut |e| {
                    for (ev, gv) in e.data_mut().iter_mut().zip(g.data()) {
                        *ev += gv * c;
                    }
                });
            }
            Op::Exp(a) => {
                let x = self.vals[*a].clone();
                acc(*a, (x.rows(), x.cols()), &mut |e| {
                    for ((ev, gv), xv) in e.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *ev += gv * xv.exp();
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.vals[*a].clone();
                acc(*a, (x.rows(), x.cols()), &mut |e| {
                    for ((ev, gv), xv) in e.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        let s = sigmoid(*xv);
                        *ev += gv * s * (1.0 + xv * (1.0 - s));
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.vals[*a].clone();
                acc(*a, (x.rows(), x.cols()), &mut |e| {
                    for ((ev, gv), xv) in e.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        // subgradient at 0 fixed to 0
                        let s = if *xv > 0.0 {
                            1.0
                        } else if *xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *ev += gv * s;
                    }
                });
            }
            Op::PadReplicate(a, left, right) => {
                let x = &self.vals[*a];
                let (c, n) = (x.rows(), x.cols());
                acc(*a, (c, n), &mut |e| {
                    for v in 0..c {
                        for j in 0..*left {
                            let val = e.get(v, 0) + g.get(v, j);
                            e.set(v, 0, val);
                        }
                        for i in 0..n {
                            let val = e.get(v, i) + g.get(v, left + i);
                            e.set(v, i, val);
                        }
                        for j in 0..*right {
                            let val = e.get(v, n - 1) + g.get(v, left + n + j);
                            e.set(v, n - 1, val);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, k } => {
                let xv = self.vals[*x].clone();
                let wv = self.vals[*w].clone();
                let (in_c, n) = (xv.rows(), xv.cols());
                let out_c = wv.rows();
                let m = n - k + 1;
                acc(*x, (in_c, n), &mut |e| {
                    for o in 0..out_c {
                        for t in 0..m {
                            let gv = g.get(o, t);
                            for i in 0..in_c {
                                for j in 0..*k {
                                    let val = e.get(i, t + j) + gv * wv.get(o, i * k + j);
                                    e.set(i, t + j, val);
                                }
                            }
                        }
                    }
                });
                acc(*w, (out_c, in_c * k), &mut |e| {
                    for o in 0..out_c {
                        for t in 0..m {
                            let gv = g.get(o, t);
                            for i in 0..in_c {
                                for j in 0..*k {
                                    let val = e.get(o, i * k + j) + gv * xv.get(i, t + j);
                                    e.set(o, i * k + j, val);
                                }
                            }
                        }
                    }
                });
                acc(*b, (1, out_c), &mut |e| {
                    for o in 0..out_c {
                        let mut s = 0.0;
                        for t in 0..m {
                            s += g.get(o, t);
                        }
                        e.set(0, o, e.get(0, o) + s);
                    }
                });
            }
            Op::TimeLinear { x, w, b } => {
                let xv = self.vals[*x].clone();
                let wv = self.vals[*w].clone();
                let (c, n_in) = (xv.rows(), xv.cols());
                let n_out = wv.rows();
                acc(*x, (c, n_in), &mut |e| {
                    for v in 0..c {
                        for i in 0..n_in {
                            let mut s = 0.0;
                            for j in 0..n_out {
                                s += wv.get(j, i) * g.get(v, j);
                            }
                            e.set(v, i, e.get(v, i) + s);
                        }
                    }
                });
                acc(*w, (n_out, n_in), &mut |e| {
                    for j in 0..n_out {
                        for i in 0..n_in {
                            let mut s = 0.0;
                            for v in 0..c {
                                s += g.get(v, j) * xv.get(v, i);
                            }
                            e.set(j, i, e.get(j, i) + s);
                        }
                    }
                });
                acc(*b, (1, n_out), &mut |e| {
                    for j in 0..n_out {
                        let mut s = 0.0;
                        for v in 0..c {
                            s += g.get(v, j);
                        }
                        e.set(0, j, e.get(0, j) + s);
                    }
                });
            }
            Op::GatherCols(a, idx) => {
                let x = &self.vals[*a];
                let (c, n) = (x.rows(), x.cols());
                acc(*a, (c, n), &mut |e| {
                    for (j, &i) in idx.iter().enumerate() {
                        for v in 0..c {
                            e.set(v, i, e.get(v, i) + g.get(v, j));
                        }
                    }
                });
            }
            Op::ScatterCols { x, idx, .. } => {
                let src = &self.vals[*x];
                let (c, m) = (src.rows(), src.cols());
                acc(*x, (c, m), &mut |e| {
                    for (j, &i) in idx.iter().enumerate() {
                        for v in 0..c {
                            e.set(v, j, e.get(v, j) + g.get(v, i));
                        }
                    }
                });
            }
            Op::GatherCells(a, cells) => {
                let x = &self.vals[*a];
                let shape = (x.rows(), x.cols());
                acc(*a, shape, &mut |e| {
                    for (j, &cell) in cells.iter().enumerate() {
                        e.data_mut()[cell] += g.data()[j];
                    }
                });
            }
            Op::ScatterCells { x, cells, .. } => {
                let src = &self.vals[*x];
                let shape = (src.rows(), src.cols());
                acc(*x, shape, &mut |e| {
                    for (j, &cell) in cells.iter().enumerate() {
                        e.data_mut()[j] += g.data()[cell];
                    }
                });
            }
            Op::SumAll(a) => {
                let x = &self.vals[*a];
                let shape = (x.rows(), x.cols());
                let gv = g.data()[0];
                acc(*a, shape, &mut |e| {
                    for ev in e.data_mut() {
                        *ev += gv;
                    }
                });
            }
        }
    }

    /// Re-executes every recorded op from the leaf values and returns the
    /// recomputed slot values (same order as recorded).
    pub fn replay(&self) -> Vec<Matrix> {
        let mut vals: Vec<Matrix> = Vec::with_capacity(self.vals.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input | Op::Param => self.vals[node.out].clone(),
                Op::Add(a, b) => zip_vals(&vals[*a], &vals[*b], |x, y| x + y),
                Op::Sub(a, b) => zip_vals(&vals[*a], &vals[*b], |x, y| x - y),
                Op::Mul(a, b) => zip_vals(&vals[*a], &vals[*b], |x, y| x * y),
                Op::Scale(a, c) => map_vals(&vals[*a], |x| x * c),
                Op::Exp(a) => map_vals(&vals[*a], f64::exp),
                Op::Silu(a) => map_vals(&vals[*a], |x| x * sigmoid(x)),
                Op::Abs(a) => map_vals(&vals[*a], f64::abs),
                Op::PadReplicate(a, l, r) => pad_forward(&vals[*a], *l, *r),
                Op::Conv1d { x, w, b, k } => conv1d_forward(&vals[*x], &vals[*w], &vals[*b], *k),
                Op::TimeLinear { x, w, b } => time_linear_forward(&vals[*x], &vals[*w], &vals[*b]),
                Op::GatherCols(a, idx) => {
                    let x = &vals[*a];
                    let mut out = Matrix::zeros(x.rows(), idx.len());
                    for (j, &i) in idx.iter().enumerate() {
                        for v in 0..x.rows() {
                            out.set(v, j, x.get(v, i));
                        }
                    }
                    out
                }
                Op::ScatterCols { x, idx, out_len } => {
                    let src = &vals[*x];
                    let mut out = Matrix::zeros(src.rows(), *out_len);
                    for (j, &i) in idx.iter().enumerate() {
                        for v in 0..src.rows() {
                            out.set(v, i, out.get(v, i) + src.get(v, j));
                        }
                    }
                    out
                }
                Op::GatherCells(a, cells) => {
                    let x = &vals[*a];
                    let mut out = Matrix::zeros(1, cells.len());
                    for (j, &cell) in cells.iter().enumerate() {
                        out.data_mut()[j] = x.data()[cell];
                    }
                    out
                }
                Op::ScatterCells { x, cells, d, t } => {
                    let src = &vals[*x];
                    let mut out = Matrix::zeros(*d, *t);
                    for (j, &cell) in cells.iter().enumerate() {
                        out.data_mut()[cell] += src.data()[j];
                    }
                    out
                }
                Op::SumAll(a) => {
                    let mut out = Matrix::zeros(1, 1);
                    out.data_mut()[0] = vals[*a].data().iter().sum();
                    out
                }
            };
            vals.push(v);
        }
        vals
    }

    /// True when replaying the tape reproduces every recorded value
    /// bit-exactly.
    pub fn replay_matches(&self) -> bool {
        let fresh = self.replay();
        fresh.len() == self.vals.len()
            && fresh.iter().zip(&self.vals).all(|(a, b)| {
                a.rows() == b.rows()
                    && a.cols() == b.cols()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn zip_vals(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, v);
    }
    out
}

fn map_vals(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let mut out = a.clone();
    for o in out.data_mut() {
        *o = f(*o);
    }
    out
}

fn pad_forward(x: &Matrix, left: usize, right: usize) -> Matrix {
    let (c, n) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(c, n + left + right);
    for v in 0..c {
        for j in 0..left {
            out.set(v, j, x.get(v, 0));
        }
        for i in 0..n {
            out.set(v, left + i, x.get(v, i));
        }
        for j in 0..right {
            out.set(v, left + n + j, x.get(v, n - 1));
        }
    }
    out
}

fn conv1d_forward(x: &Matrix, w: &Matrix, b: &Matrix, k: usize) -> Matrix {
    let (in_c, n) = (x.rows(), x.cols());
    let out_c = w.rows();
    assert!(k >= 1 && n >= k, "convolution needs len >= kernel");
    assert_eq!(w.cols(), in_c * k, "kernel shape mismatch");
    assert_eq!(b.cols(), out_c, "bias shape mismatch");
    let m = n - k + 1;
    let mut out = Matrix::zeros(out_c, m);
    for o in 0..out_c {
        for t in 0..m {
            let mut s = b.get(0, o);
            for i in 0..in_c {
                for j in 0..k {
                    s += w.get(o, i * k + j) * x.get(i, t + j);
                }
            }
            out.set(o, t, s);
        }
    }
    out
}

fn time_linear_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let (c, n_in) = (x.rows(), x.cols());
    let n_out = w.rows();
    assert_eq!(w.cols(), n_in, "time-linear weight shape mismatch");
    assert_eq!(b.cols(), n_out, "time-linear bias shape mismatch");
    let mut out = Matrix::zeros(c, n_out);
    for v in 0..c {
        for j in 0..n_out {
            let mut s = b.get(0, j);
            for i in 0..n_in {
                s += w.get(j, i) * x.get(v, i);
            }
            out.set(v, j, s);
        }
    }
    out
}
