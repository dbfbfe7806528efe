//! Tape-based reverse-mode differentiation over dense 2-D tensors and
//! segmented (per-neighborhood) reductions.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] replays the
//! record in reverse topological order exactly once, accumulating adjoints
//! into per-tensor gradient buffers. Everything is `f64`.
//!
//! Tensors are row-major `rows x cols` matrices; a scalar is `1 x 1` and a
//! vector is `n x 1`. Handles ([`TapeTensor`]) are cheap copyable ids into
//! the tape; values and gradients are read back through the tape.
//!
//! A tape is single-threaded. Distinct tapes share no state and may run on
//! distinct threads; model parameters are copied into a tape per step.

mod check;

pub use check::{finite_difference_check, FdCheck};

use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a tensor recorded on a [`Tape`].
///
/// Carries its shape so shape checks do not need to borrow the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeTensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl TapeTensor {
    pub fn id(&self) -> usize {
        self.id
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

/// Operation kind for the generic [`Tape::forward_op`] entry point.
///
/// Attribute-carrying variants own their attributes; index vectors are moved
/// into the tape record.
#[derive(Debug, Clone)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    AddScalar(f64),
    MulScalar(f64),
    PowScalar(f64),
    Clamp { lo: f64, hi: f64 },
    Log,
    Sqrt,
    Sin,
    Cos,
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    ConcatRows,
    ConcatCols,
    GatherRows(Vec<u32>),
    SelectColumns { start: usize, len: usize },
    SegmentedSoftmax(Vec<u32>),
    SegmentedSum { segments: Vec<u32>, num_segments: usize },
    Sum,
    Mean,
    /// Multiply by a pre-sampled dropout mask (already inverted-scaled).
    DropoutMask(Vec<f64>),
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    PowScalar(usize, f64),
    Clamp(usize, f64, f64),
    Log(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<u32>),
    SelectColumns(usize, usize, usize),
    SegmentedSoftmax(usize, Vec<u32>),
    SegmentedSum(usize, Vec<u32>),
    Sum(usize),
    Mean(usize),
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Ordered record of operations; inputs always precede their consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of tensors recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> TapeTensor {
        debug_assert_eq!(values.len(), rows * cols);
        let id = self.nodes.len();
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            rows,
            cols,
            values,
            grad,
            op,
        });
        TapeTensor { id, rows, cols }
    }

    /// Record an input tensor. Parameters, constants and data all enter the
    /// tape this way; every recorded tensor receives a gradient on backward.
    pub fn leaf(&mut self, rows: usize, cols: usize, values: &[f64]) -> Result<TapeTensor> {
        if values.len() != rows * cols {
            return Err(shape_err(
                "leaf",
                format!("{} values for shape {rows}x{cols}", values.len()),
            ));
        }
        Ok(self.push(rows, cols, values.to_vec(), Op::Leaf))
    }

    /// Scalar leaf.
    pub fn scalar(&mut self, value: f64) -> TapeTensor {
        self.push(1, 1, vec![value], Op::Leaf)
    }

    pub fn values(&self, t: TapeTensor) -> &[f64] {
        &self.nodes[t.id].values
    }

    pub fn value_scalar(&self, t: TapeTensor) -> f64 {
        self.nodes[t.id].values[0]
    }

    /// Gradient buffer of `t`; all-zero until [`Tape::backward`] runs.
    pub fn grad(&self, t: TapeTensor) -> &[f64] {
        &self.nodes[t.id].grad
    }

    /// Zero every gradient buffer on the tape.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    /// Generic op application; the named methods are thin wrappers over the
    /// same records.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[TapeTensor]) -> Result<TapeTensor> {
        let unary = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArgument {
                    what: "forward_op",
                    detail: format!("expected {n} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                unary(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                unary(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                unary(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                unary(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::AddScalar(c) => {
                unary(1)?;
                Ok(self.add_scalar(inputs[0], c))
            }
            OpKind::MulScalar(c) => {
                unary(1)?;
                Ok(self.mul_scalar(inputs[0], c))
            }
            OpKind::PowScalar(p) => {
                unary(1)?;
                Ok(self.pow_scalar(inputs[0], p))
            }
            OpKind::Clamp { lo, hi } => {
                unary(1)?;
                Ok(self.clamp(inputs[0], lo, hi))
            }
            OpKind::Log => {
                unary(1)?;
                Ok(self.log(inputs[0]))
            }
            OpKind::Sqrt => {
                unary(1)?;
                Ok(self.sqrt(inputs[0]))
            }
            OpKind::Sin => {
                unary(1)?;
                Ok(self.sin(inputs[0]))
            }
            OpKind::Cos => {
                unary(1)?;
                Ok(self.cos(inputs[0]))
            }
            OpKind::Relu => {
                unary(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::LeakyRelu { slope } => {
                unary(1)?;
                Ok(self.leaky_relu(inputs[0], slope))
            }
            OpKind::Sigmoid => {
                unary(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::ConcatCols => self.concat_cols(inputs),
            OpKind::GatherRows(idx) => {
                unary(1)?;
                self.gather_rows(inputs[0], idx)
            }
            OpKind::SelectColumns { start, len } => {
                unary(1)?;
                self.select_columns(inputs[0], start, len)
            }
            OpKind::SegmentedSoftmax(seg) => {
                unary(1)?;
                self.segmented_softmax(inputs[0], seg)
            }
            OpKind::SegmentedSum {
                segments,
                num_segments,
            } => {
                unary(1)?;
                self.segmented_sum(inputs[0], segments, num_segments)
            }
            OpKind::Sum => {
                unary(1)?;
                Ok(self.sum(inputs[0]))
            }
            OpKind::Mean => {
                unary(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::DropoutMask(mask) => {
                unary(1)?;
                let x = inputs[0];
                if mask.len() != x.len() {
                    return Err(shape_err(
                        "dropout-mask-multiply",
                        format!("mask len {} vs tensor {}x{}", mask.len(), x.rows, x.cols),
                    ));
                }
                let m = self.leaf(x.rows, x.cols, &mask)?;
                self.mul(x, m)
            }
        }
    }

    pub fn matmul(&mut self, a: TapeTensor, b: TapeTensor) -> Result<TapeTensor> {
        if a.cols != b.rows {
            return Err(shape_err(
                "matmul",
                format!("{}x{} . {}x{}", a.rows, a.cols, b.rows, b.cols),
            ));
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.id].values;
            let bv = &self.nodes[b.id].values;
            for i in 0..m {
                for l in 0..k {
                    let x = av[i * k + l];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        Ok(self.push(m, n, out, Op::MatMul(a.id, b.id)))
    }

    /// Elementwise add; `b` may also be a `1 x cols` row vector broadcast
    /// over the rows of `a` (bias add).
    pub fn add(&mut self, a: TapeTensor, b: TapeTensor) -> Result<TapeTensor> {
        let av = &self.nodes[a.id].values;
        let bv = &self.nodes[b.id].values;
        let out = if a.rows == b.rows && a.cols == b.cols {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        } else if b.rows == 1 && b.cols == a.cols {
            let mut out = Vec::with_capacity(a.len());
            for i in 0..a.rows {
                for j in 0..a.cols {
                    out.push(av[i * a.cols + j] + bv[j]);
                }
            }
            out
        } else {
            return Err(shape_err(
                "add",
                format!("{}x{} + {}x{}", a.rows, a.cols, b.rows, b.cols),
            ));
        };
        Ok(self.push(a.rows, a.cols, out, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: TapeTensor, b: TapeTensor) -> Result<TapeTensor> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(shape_err(
                "sub",
                format!("{}x{} - {}x{}", a.rows, a.cols, b.rows, b.cols),
            ));
        }
        let out = self.nodes[a.id]
            .values
            .iter()
            .zip(&self.nodes[b.id].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(a.rows, a.cols, out, Op::Sub(a.id, b.id)))
    }

    /// Elementwise multiply; either operand may be an `n x 1` column that is
    /// broadcast across the columns of the other (per-row scaling).
    pub fn mul(&mut self, a: TapeTensor, b: TapeTensor) -> Result<TapeTensor> {
        let av = &self.nodes[a.id].values;
        let bv = &self.nodes[b.id].values;
        let (rows, cols, out) = if a.rows == b.rows && a.cols == b.cols {
            (
                a.rows,
                a.cols,
                av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            )
        } else if b.cols == 1 && b.rows == a.rows {
            let mut out = Vec::with_capacity(a.len());
            for i in 0..a.rows {
                for j in 0..a.cols {
                    out.push(av[i * a.cols + j] * bv[i]);
                }
            }
            (a.rows, a.cols, out)
        } else if a.cols == 1 && a.rows == b.rows {
            let mut out = Vec::with_capacity(b.len());
            for i in 0..b.rows {
                for j in 0..b.cols {
                    out.push(bv[i * b.cols + j] * av[i]);
                }
            }
            (b.rows, b.cols, out)
        } else {
            return Err(shape_err(
                "mul",
                format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
            ));
        };
        Ok(self.push(rows, cols, out, Op::Mul(a.id, b.id)))
    }

    pub fn add_scalar(&mut self, a: TapeTensor, c: f64) -> TapeTensor {
        let out = self.nodes[a.id].values.iter().map(|x| x + c).collect();
        self.push(a.rows, a.cols, out, Op::AddScalar(a.id))
    }

    pub fn mul_scalar(&mut self, a: TapeTensor, c: f64) -> TapeTensor {
        let out = self.nodes[a.id].values.iter().map(|x| x * c).collect();
        self.push(a.rows, a.cols, out, Op::MulScalar(a.id, c))
    }

    pub fn pow_scalar(&mut self, a: TapeTensor, p: f64) -> TapeTensor {
        let out = self.nodes[a.id].values.iter().map(|x| x.powf(p)).collect();
        self.push(a.rows, a.cols, out, Op::PowScalar(a.id, p))
    }

    pub fn clamp(&mut self, a: TapeTensor, lo: f64, hi: f64) -> TapeTensor {
        let out = self.nodes[a.id]
            .values
            .iter()
            .map(|x| x.clamp(lo, hi))
            .collect();
        self.push(a.rows, a.cols, out, Op::Clamp(a.id, lo, hi))
    }

    pub fn log(&mut self, a: TapeTensor) -> TapeTensor {
        let out = self.nodes[a.id].values.iter().map(|x| x.ln()).collect();
        self.push(a.rows, a.cols, out, Op::Log(a.id))
    }

    pub fn sqrt(&mut self, a: TapeTensor) -> TapeTensor {
        let out = self.nodes[a.id].values.iter().map(|x| x.sqrt()).collect();
        self.push(a.rows, a.cols, out, Op::Sqrt(a.id))
    }

    pub fn sin(&mut self, a: TapeTensor) -> TapeTensor {
        let out = self.nodes[a.id].values.iter().map(|x| x.sin()).collect();
        self.push(a.rows, a.cols, out, Op::Sin(a.id))
    }

    pub fn cos(&mut self, a: TapeTensor) -> TapeTensor {
        let out = self.nodes[a.id].values.iter().map(|x| x.cos()).collect();
        self.push(a.rows, a.cols, out, Op::Cos(a.id))
    }

    pub fn relu(&mut self, a: TapeTensor) -> TapeTensor {
        let out = self.nodes[a.id].values.iter().map(|x| x.max(0.0)).collect();
        self.push(a.rows, a.cols, out, Op::Relu(a.id))
    }

    pub fn leaky_relu(&mut self, a: TapeTensor, slope: f64) -> TapeTensor {
        let out = self.nodes[a.id]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.push(a.rows, a.cols, out, Op::LeakyRelu(a.id, slope))
    }

    pub fn sigmoid(&mut self, a: TapeTensor) -> TapeTensor {
        let out = self.nodes[a.id]
            .values
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(a.rows, a.cols, out, Op::Sigmoid(a.id))
    }

    /// Stack inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, inputs: &[TapeTensor]) -> Result<TapeTensor> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument {
                what: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let cols = inputs[0].cols;
        let mut rows = 0;
        for t in inputs {
            if t.cols != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("column counts differ: {} vs {}", cols, t.cols),
                ));
            }
            rows += t.rows;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for t in inputs {
            out.extend_from_slice(&self.nodes[t.id].values);
        }
        let ids = inputs.iter().map(|t| t.id).collect();
        Ok(self.push(rows, cols, out, Op::ConcatRows(ids)))
    }

    /// Concatenate inputs horizontally; all must share a row count.
    pub fn concat_cols(&mut self, inputs: &[TapeTensor]) -> Result<TapeTensor> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument {
                what: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let rows = inputs[0].rows;
        let mut cols = 0;
        for t in inputs {
            if t.rows != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("row counts differ: {} vs {}", rows, t.rows),
                ));
            }
            cols += t.cols;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for t in inputs {
                let v = &self.nodes[t.id].values;
                out.extend_from_slice(&v[i * t.cols..(i + 1) * t.cols]);
            }
        }
        let ids = inputs.iter().map(|t| t.id).collect();
        Ok(self.push(rows, cols, out, Op::ConcatCols(ids)))
    }

    /// Row gather: `out[r, :] = a[indices[r], :]`.
    pub fn gather_rows(&mut self, a: TapeTensor, indices: Vec<u32>) -> Result<TapeTensor> {
        for &i in &indices {
            if i as usize >= a.rows {
                return Err(Error::InvalidArgument {
                    what: "gather_rows",
                    detail: format!("index {i} out of {} rows", a.rows),
                });
            }
        }
        let cols = a.cols;
        let mut out = Vec::with_capacity(indices.len() * cols);
        {
            let v = &self.nodes[a.id].values;
            for &i in &indices {
                let i = i as usize;
                out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
            }
        }
        let rows = indices.len();
        Ok(self.push(rows, cols, out, Op::GatherRows(a.id, indices)))
    }

    /// Column window: `out[i, j] = a[i, start + j]` for `j < len`.
    pub fn select_columns(&mut self, a: TapeTensor, start: usize, len: usize) -> Result<TapeTensor> {
        if start + len > a.cols {
            return Err(shape_err(
                "select_columns",
                format!("window {start}..{} of {} cols", start + len, a.cols),
            ));
        }
        let mut out = Vec::with_capacity(a.rows * len);
        {
            let v = &self.nodes[a.id].values;
            for i in 0..a.rows {
                out.extend_from_slice(&v[i * a.cols + start..i * a.cols + start + len]);
            }
        }
        Ok(self.push(a.rows, len, out, Op::SelectColumns(a.id, start, len)))
    }

    /// Numerically stable softmax within each contiguous segment of a column
    /// vector. `segments[r]` is the segment id of row `r` and must be
    /// non-decreasing; each segment's outputs sum to 1.
    pub fn segmented_softmax(&mut self, a: TapeTensor, segments: Vec<u32>) -> Result<TapeTensor> {
        if a.cols != 1 {
            return Err(shape_err(
                "segmented_softmax",
                format!("expected column vector, got {}x{}", a.rows, a.cols),
            ));
        }
        if segments.len() != a.rows {
            return Err(shape_err(
                "segmented_softmax",
                format!("{} segment ids for {} rows", segments.len(), a.rows),
            ));
        }
        if segments.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument {
                what: "segmented_softmax",
                detail: "segment ids must be non-decreasing".into(),
            });
        }
        let v = &self.nodes[a.id].values;
        let mut out = vec![0.0; v.len()];
        let mut start = 0;
        while start < segments.len() {
            let seg = segments[start];
            let mut end = start + 1;
            while end < segments.len() && segments[end] == seg {
                end += 1;
            }
            let max = v[start..end].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for r in start..end {
                let e = (v[r] - max).exp();
                out[r] = e;
                denom += e;
            }
            for o in &mut out[start..end] {
                *o /= denom;
            }
            start = end;
        }
        Ok(self.push(a.rows, 1, out, Op::SegmentedSoftmax(a.id, segments)))
    }

    /// Sum rows into `num_segments` buckets: `out[segments[r], :] += a[r, :]`.
    /// Accumulation runs in row order, so results are deterministic.
    pub fn segmented_sum(
        &mut self,
        a: TapeTensor,
        segments: Vec<u32>,
        num_segments: usize,
    ) -> Result<TapeTensor> {
        if segments.len() != a.rows {
            return Err(shape_err(
                "segmented_sum",
                format!("{} segment ids for {} rows", segments.len(), a.rows),
            ));
        }
        for &s in &segments {
            if s as usize >= num_segments {
                return Err(Error::InvalidArgument {
                    what: "segmented_sum",
                    detail: format!("segment id {s} out of {num_segments}"),
                });
            }
        }
        let cols = a.cols;
        let mut out = vec![0.0; num_segments * cols];
        {
            let v = &self.nodes[a.id].values;
            for (r, &s) in segments.iter().enumerate() {
                let s = s as usize;
                for j in 0..cols {
                    out[s * cols + j] += v[r * cols + j];
                }
            }
        }
        Ok(self.push(num_segments, cols, out, Op::SegmentedSum(a.id, segments)))
    }

    pub fn sum(&mut self, a: TapeTensor) -> TapeTensor {
        let s = self.nodes[a.id].values.iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a.id))
    }

    pub fn mean(&mut self, a: TapeTensor) -> TapeTensor {
        let n = self.nodes[a.id].values.len().max(1);
        let s: f64 = self.nodes[a.id].values.iter().sum();
        self.push(1, 1, vec![s / n as f64], Op::Mean(a.id))
    }

    /// Inverted dropout: multiply by a fresh Bernoulli mask scaled by
    /// `1/(1-rate)`. The mask is a recorded constant, so replaying the same
    /// construction with the same RNG stream is bit-identical. `rate == 0`
    /// returns the input unchanged.
    pub fn dropout<R: Rng>(&mut self, x: TapeTensor, rate: f64, rng: &mut R) -> Result<TapeTensor> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument {
                what: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.leaf(x.rows, x.cols, &mask)?;
        self.mul(x, m)
    }

    /// Reverse pass from a scalar loss. Zeroes all gradient buffers, seeds
    /// `d(loss)/d(loss) = 1`, and replays the tape once in reverse order.
    pub fn backward(&mut self, loss: TapeTensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::InvalidArgument {
                what: "backward",
                detail: format!("loss must be scalar, got {}x{}", loss.rows, loss.cols),
            });
        }
        self.reset_grads();
        self.nodes[loss.id].grad[0] = 1.0;
        for i in (0..=loss.id).rev() {
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let g = &node.grad;
        if g.iter().all(|&x| x == 0.0) {
            return;
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = (node.rows, node.cols);
                let k = before[*a].cols;
                // dA = dC . B^T ; dB = A^T . dC
                let (pa, pb) = (*a, *b);
                if pa == pb {
                    // square self-product; handle via temporary copies
                    let av = before[pa].values.clone();
                    let ga = {
                        let mut ga = vec![0.0; av.len()];
                        for i2 in 0..m {
                            for l in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * av[l * n + j];
                                }
                                ga[i2 * k + l] += s;
                            }
                        }
                        for l in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i2 in 0..m {
                                    s += av[i2 * k + l] * g[i2 * n + j];
                                }
                                ga[l * n + j] += s;
                            }
                        }
                        ga
                    };
                    for (dst, src) in before[pa].grad.iter_mut().zip(ga) {
                        *dst += src;
                    }
                } else {
                    let (na, nb) = two_mut(before, pa, pb);
                    for i2 in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            let brow = &nb.values[l * n..(l + 1) * n];
                            for j in 0..n {
                                s += g[i2 * n + j] * brow[j];
                            }
                            na.grad[i2 * k + l] += s;
                        }
                    }
                    for l in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i2 in 0..m {
                                s += na.values[i2 * k + l] * g[i2 * n + j];
                            }
                            nb.grad[l * n + j] += s;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                let (pa, pb) = (*a, *b);
                let (rows, cols) = (node.rows, node.cols);
                if pa == pb {
                    for (idx, gi) in g.iter().enumerate() {
                        before[pa].grad[idx] += 2.0 * gi;
                    }
                } else {
                    let (na, nb) = two_mut(before, pa, pb);
                    for (dst, gi) in na.grad.iter_mut().zip(g) {
                        *dst += gi;
                    }
                    if nb.rows == 1 && rows > 1 {
                        for i2 in 0..rows {
                            for j in 0..cols {
                                nb.grad[j] += g[i2 * cols + j];
                            }
                        }
                    } else {
                        for (dst, gi) in nb.grad.iter_mut().zip(g) {
                            *dst += gi;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                let (pa, pb) = (*a, *b);
                if pa == pb {
                    // x - x: gradients cancel
                } else {
                    let (na, nb) = two_mut(before, pa, pb);
                    for (dst, gi) in na.grad.iter_mut().zip(g) {
                        *dst += gi;
                    }
                    for (dst, gi) in nb.grad.iter_mut().zip(g) {
                        *dst -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (pa, pb) = (*a, *b);
                let (rows, cols) = (node.rows, node.cols);
                if pa == pb {
                    // x * x
                    let n = &mut before[pa];
                    for (idx, gi) in g.iter().enumerate() {
                        n.grad[idx] += 2.0 * n.values[idx] * gi;
                    }
                } else {
                    let (na, nb) = two_mut(before, pa, pb);
                    let a_bcast = na.cols == 1 && cols > 1;
                    let b_bcast = nb.cols == 1 && cols > 1;
                    if b_bcast {
                        for i2 in 0..rows {
                            let s = nb.values[i2];
                            for j in 0..cols {
                                let gi = g[i2 * cols + j];
                                na.grad[i2 * cols + j] += gi * s;
                                nb.grad[i2] += gi * na.values[i2 * cols + j];
                            }
                        }
                    } else if a_bcast {
                        for i2 in 0..rows {
                            let s = na.values[i2];
                            for j in 0..cols {
                                let gi = g[i2 * cols + j];
                                nb.grad[i2 * cols + j] += gi * s;
                                na.grad[i2] += gi * nb.values[i2 * cols + j];
                            }
                        }
                    } else {
                        for idx in 0..g.len() {
                            na.grad[idx] += g[idx] * nb.values[idx];
                            nb.grad[idx] += g[idx] * na.values[idx];
                        }
                    }
                }
            }
            Op::AddScalar(a) => {
                for (dst, gi) in before[*a].grad.iter_mut().zip(g) {
                    *dst += gi;
                }
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                for (dst, gi) in before[*a].grad.iter_mut().zip(g) {
                    *dst += c * gi;
                }
            }
            Op::PowScalar(a, p) => {
                let p = *p;
                let n = &mut before[*a];
                for (idx, gi) in g.iter().enumerate() {
                    n.grad[idx] += p * n.values[idx].powf(p - 1.0) * gi;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let n = &mut before[*a];
                for (idx, gi) in g.iter().enumerate() {
                    let x = n.values[idx];
                    if x >= lo && x <= hi {
                        n.grad[idx] += gi;
                    }
                }
            }
            Op::Log(a) => {
                let n = &mut before[*a];
                for (idx, gi) in g.iter().enumerate() {
                    n.grad[idx] += gi / n.values[idx];
                }
            }
            Op::Sqrt(a) => {
                let n = &mut before[*a];
                for (idx, gi) in g.iter().enumerate() {
                    n.grad[idx] += gi / (2.0 * node.values[idx]);
                }
            }
            Op::Sin(a) => {
                let n = &mut before[*a];
                for (idx, gi) in g.iter().enumerate() {
                    n.grad[idx] += gi * n.values[idx].cos();
                }
            }
            Op::Cos(a) => {
                let n = &mut before[*a];
                for (idx, gi) in g.iter().enumerate() {
                    n.grad[idx] -= gi * n.values[idx].sin();
                }
            }
            Op::Relu(a) => {
                let n = &mut before[*a];
                for (idx, gi) in g.iter().enumerate() {
                    if n.values[idx] > 0.0 {
                        n.grad[idx] += gi;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let n = &mut before[*a];
                for (idx, gi) in g.iter().enumerate() {
                    let f = if n.values[idx] > 0.0 { 1.0 } else { slope };
                    n.grad[idx] += f * gi;
                }
            }
            Op::Sigmoid(a) => {
                let n = &mut before[*a];
                for (idx, gi) in g.iter().enumerate() {
                    let s = node.values[idx];
                    n.grad[idx] += gi * s * (1.0 - s);
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &a in ids {
                    let len = before[a].values.len();
                    for (dst, gi) in before[a].grad.iter_mut().zip(&g[offset..offset + len]) {
                        *dst += gi;
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(ids) => {
                let cols = node.cols;
                for i2 in 0..node.rows {
                    let mut offset = 0;
                    for &a in ids {
                        let c = before[a].cols;
                        for j in 0..c {
                            before[a].grad[i2 * c + j] += g[i2 * cols + offset + j];
                        }
                        offset += c;
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                let cols = node.cols;
                let n = &mut before[*a];
                for (r, &src) in indices.iter().enumerate() {
                    let src = src as usize;
                    for j in 0..cols {
                        n.grad[src * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::SelectColumns(a, start, len) => {
                let (start, len) = (*start, *len);
                let n = &mut before[*a];
                let in_cols = n.cols;
                for i2 in 0..node.rows {
                    for j in 0..len {
                        n.grad[i2 * in_cols + start + j] += g[i2 * len + j];
                    }
                }
            }
            Op::SegmentedSoftmax(a, segments) => {
                let s = &node.values;
                let n = &mut before[*a];
                let mut start = 0;
                while start < segments.len() {
                    let seg = segments[start];
                    let mut end = start + 1;
                    while end < segments.len() && segments[end] == seg {
                        end += 1;
                    }
                    let mut dot = 0.0;
                    for r in start..end {
                        dot += g[r] * s[r];
                    }
                    for r in start..end {
                        n.grad[r] += s[r] * (g[r] - dot);
                    }
                    start = end;
                }
            }
            Op::SegmentedSum(a, segments) => {
                let cols = node.cols;
                let n = &mut before[*a];
                for (r, &seg) in segments.iter().enumerate() {
                    let seg = seg as usize;
                    for j in 0..cols {
                        n.grad[r * cols + j] += g[seg * cols + j];
                    }
                }
            }
            Op::Sum(a) => {
                let gi = g[0];
                for dst in before[*a].grad.iter_mut() {
                    *dst += gi;
                }
            }
            Op::Mean(a) => {
                let n = &mut before[*a];
                let gi = g[0] / n.values.len().max(1) as f64;
                for dst in n.grad.iter_mut() {
                    *dst += gi;
                }
            }
        }
    }
}

fn two_mut(slice: &mut [Node], a: usize, b: usize) -> (&mut Node, &mut Node) {
    debug_assert_ne!(a, b);
    if a < b {
        let (lo, hi) = slice.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = slice.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
