use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::linalg::{log_abs_det, lu_inverse, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{Tensor, MASKED};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    Select(Rc<[bool]>, Var, Var),
    Fill(Var, Rc<[bool]>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Dropout(Var, Vec<f64>),
    MinOf(Vec<Var>, usize),
    ClampMax(Var, f64),
    ClampMin(Var, f64),
    DiagEmbed(Var),
    LogAbsDet(Var, Vec<f64>),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient; only kept for leaves and parameters.
    grad: Option<Vec<f64>>,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so the tape is always
/// topologically sorted. Nodes whose inputs need no gradient are stored as
/// constants and skipped by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn broadcast_mask(mask: &[bool], len: usize, cols: usize, i: usize) -> bool {
    if mask.len() == len {
        mask[i]
    } else {
        mask[i % cols]
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// The node's value with its accumulated gradient attached.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone();
        t.requires_grad = node.requires_grad;
        t.grad = node.grad.clone();
        t
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op, name: &'static str) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Places a tensor on the tape; gradients are tracked iff it requires them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node {
            value: Tensor::from_parts(t.shape, t.data),
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    ///
    /// A tape must only ever be bound to one store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            value: Tensor::from_parts(t.shape.clone(), t.data.clone()),
            requires_grad: t.requires_grad,
            op: Op::Param(id),
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Gradients accumulated into bound parameters.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .nodes
            .iter()
            .filter_map(|n| match (&n.op, &n.grad) {
                (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
                _ => None,
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- forward operations ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push(Tensor::from_parts(vec![n, m], out), &[a], Op::Transpose(a), "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, &[a, b], Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, &[a, b], Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, &[a, b], Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        self.push(out, &[a], Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x + c);
        self.push(out, &[a], Op::Offset(a), "add_scalar")
    }

    /// `x[.., c] + bias[c]`, broadcasting the bias over all rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for input {:?}", tb.shape(), tx.shape()),
            ));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % c])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, &[x, bias], Op::AddRow(x, bias), "add_row")
    }

    /// Concatenation along the last dimension.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} vs leading {:?}", s, lead),
                ));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::from_parts(shape, data);
        self.push(out, parts, Op::ConcatLast(parts.to_vec()), "concat_last")
    }

    /// Stacks matrices with equal column count on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} vs {} columns", t.cols(), cols),
                ));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::from_parts(vec![rows, cols], data);
        self.push(out, parts, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if width == 0 || start + width > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + width),
            ));
        }
        let mut data = Vec::with_capacity(t.rows() * width);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let out = Tensor::from_parts(shape, data);
        self.push(out, &[x], Op::SliceCols(x, start), "slice_cols")
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape("select_rows", format!("indices {rows:?} of {n} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), c], data);
        self.push(out, &[x], Op::SelectRows(x, rows.to_vec()), "select_rows")
    }

    /// Column-wise mean over rows, shape `[1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; c];
        for r in 0..n {
            for (d, v) in data.iter_mut().zip(t.row(r)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= n as f64);
        self.push(Tensor::from_parts(vec![1, c], data), &[x], Op::MeanRows(x), "mean_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x)?;
        self.sum(sq)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, &[x], Op::Reshape(x), "reshape")
    }

    fn check_mask(&self, op: &'static str, x: Var, mask: &[bool]) -> Result<()> {
        let t = self.value(x);
        if mask.len() != t.len() && mask.len() != t.cols() {
            return Err(Error::shape(
                op,
                format!("mask of {} entries for {:?}", mask.len(), t.shape()),
            ));
        }
        Ok(())
    }

    /// Elementwise choice: `a` where the mask is set, `b` elsewhere.
    pub fn select(&mut self, mask: Rc<[bool]>, a: Var, b: Var) -> Result<Var> {
        self.same_shape("select", a, b)?;
        self.check_mask("select", a, &mask)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (len, c) = (ta.len(), ta.cols());
        let data = (0..len)
            .map(|i| {
                if broadcast_mask(&mask, len, c, i) {
                    ta.data()[i]
                } else {
                    tb.data()[i]
                }
            })
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, &[a, b], Op::Select(mask, a, b), "select")
    }

    /// Replaces entries where `mask` is 1 by `value`; the mask may be full-size
    /// or a single row broadcast over all rows.
    pub fn masked_fill(&mut self, x: Var, mask: &Tensor, value: f64) -> Result<Var> {
        let mut bits = Vec::with_capacity(mask.len());
        for &m in mask.data() {
            if m == 1.0 {
                bits.push(true);
            } else if m == 0.0 {
                bits.push(false);
            } else {
                return Err(Error::domain("masked_fill", format!("mask entry {m} not in {{0,1}}")));
            }
        }
        self.fill(x, bits.into(), value)
    }

    pub(crate) fn fill(&mut self, x: Var, mask: Rc<[bool]>, value: f64) -> Result<Var> {
        self.check_mask("masked_fill", x, &mask)?;
        let value = if value == f64::NEG_INFINITY { MASKED } else { value };
        let t = self.value(x);
        let (len, c) = (t.len(), t.cols());
        let data = (0..len)
            .map(|i| {
                if broadcast_mask(&mask, len, c, i) {
                    value
                } else {
                    t.data()[i]
                }
            })
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, &[x], Op::Fill(x, mask), "masked_fill")
    }

    /// Softmax over the last dimension; [`MASKED`] entries map to exactly 0.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut data = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row
                .iter()
                .filter(|&&v| v != MASKED)
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateSlice { slice: r });
            }
            let out = &mut data[r * c..(r + 1) * c];
            let mut s = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                if v != MASKED {
                    *o = (v - max).exp();
                    s += *o;
                }
            }
            out.iter_mut().for_each(|o| *o /= s);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, &[x], Op::Softmax(x), "softmax_last")
    }

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let c = t.cols();
        if g.len() != c || b.len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} bias {:?} for {:?}", g.shape(), b.shape(), t.shape()),
            ));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + Self::LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                data[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, &[x], Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::tanh);
        self.push(out, &[x], Op::Tanh(x), "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::exp);
        self.push(out, &[x], Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("log", "nonpositive input"));
        }
        let out = self.map(x, f64::ln);
        self.push(out, &[x], Op::Log(x), "log")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v * v);
        self.push(out, &[x], Op::Square(x), "square")
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::domain("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, &[x], Op::Dropout(x, scale), "dropout")
    }

    /// Minimum of scalar nodes; the gradient flows to the first minimiser.
    pub fn min_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() || xs.iter().any(|&x| self.value(x).len() != 1) {
            return Err(Error::shape("min_of", "expects one or more scalars"));
        }
        let mut arg = 0;
        for (i, &x) in xs.iter().enumerate() {
            if self.scalar(x) < self.scalar(xs[arg]) {
                arg = i;
            }
        }
        let v = self.scalar(xs[arg]);
        self.push(Tensor::scalar(v), xs, Op::MinOf(xs.to_vec(), arg), "min_of")
    }

    /// `min(x, c)`; entries above `c` receive no gradient.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.map(x, |v| v.min(c));
        self.push(out, &[x], Op::ClampMax(x, c), "clamp_max")
    }

    /// `max(x, c)`; entries below `c` receive no gradient.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.map(x, |v| v.max(c));
        self.push(out, &[x], Op::ClampMin(x, c), "clamp_min")
    }

    /// Vector of length `n` to an `n×n` diagonal matrix.
    pub fn diag_embed(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = t.data()[i];
        }
        self.push(Tensor::from_parts(vec![n, n], data), &[x], Op::DiagEmbed(x), "diag_embed")
    }

    /// `log|det A|` for a square matrix.
    pub fn log_abs_det(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.rows() != t.cols() {
            return Err(Error::shape("log_abs_det", format!("{:?}", t.shape())));
        }
        let n = t.rows();
        let (log, _) = log_abs_det(t.data(), n)?;
        let inv = lu_inverse(t.data(), n)?;
        // d log|det A| / dA = A^{-T}
        let mut inv_t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                inv_t[i * n + j] = inv[j * n + i];
            }
        }
        self.push(Tensor::scalar(log), &[a], Op::LogAbsDet(a, inv_t), "log_abs_det")
    }

    /// Records an operation whose forward value is computed by the caller.
    ///
    /// `backward(inputs, output, upstream)` returns one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        backward: impl Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Result<Var> {
        self.push(output, inputs, Op::Custom(inputs.to_vec(), Box::new(backward)), "custom")
    }

    // ---- composites --------------------------------------------------------

    /// KL divergence between two diagonal Gaussians given means and log standard deviations.
    pub fn kl_diag_gaussians(
        &mut self,
        mu_q: Var,
        log_sigma_q: Var,
        mu_p: Var,
        log_sigma_p: Var,
    ) -> Result<Var> {
        // log σp − log σq + (σq² + (μq − μp)²) / (2 σp²) − ½
        let log_ratio = self.sub(log_sigma_p, log_sigma_q)?;
        let two_lq = self.scale(log_sigma_q, 2.0)?;
        let var_q = self.exp(two_lq)?;
        let diff = self.sub(mu_q, mu_p)?;
        let diff_sq = self.square(diff)?;
        let num = self.add(var_q, diff_sq)?;
        let neg_two_lp = self.scale(log_sigma_p, -2.0)?;
        let inv_var_p = self.exp(neg_two_lp)?;
        let frac = self.mul(num, inv_var_p)?;
        let half = self.scale(frac, 0.5)?;
        let terms = self.add(log_ratio, half)?;
        let terms = self.add_scalar(terms, -0.5)?;
        self.sum(terms)
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf and parameter that
    /// requires a gradient. Calling it again without [`Tape::zero_grad`]
    /// adds to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                add_into(&mut self.nodes[i].grad, g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], contrib);
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_acc(g, tb.data(), &mut ga, m, n, k);
                    send(*a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_acc(ta.data(), g, &mut gb, m, k, n);
                    send(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        ga[c * m + r] = g[r * n + c];
                    }
                }
                send(*a, ga);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    send(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    send(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
            Op::Offset(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::AddRow(x, b) => {
                send(*x, g.to_vec());
                if needs(*b) {
                    let c = out.cols();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    send(*b, gb);
                }
            }
            Op::ConcatLast(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if needs(p) {
                        send(p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (c, w) = (tx.cols(), out.cols());
                let mut gx = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    gx[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, gx);
            }
            Op::SelectRows(x, rows) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[k * c + j];
                    }
                }
                send(*x, gx);
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (n, c) = (tx.rows(), tx.cols());
                let mut gx = vec![0.0; tx.len()];
                for r in 0..n {
                    for j in 0..c {
                        gx[r * c + j] = g[j] / n as f64;
                    }
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Select(mask, a, b) => {
                let (len, c) = (out.len(), out.cols());
                if needs(*a) {
                    let ga = (0..len)
                        .map(|i| if broadcast_mask(mask, len, c, i) { g[i] } else { 0.0 })
                        .collect();
                    send(*a, ga);
                }
                if needs(*b) {
                    let gb = (0..len)
                        .map(|i| if broadcast_mask(mask, len, c, i) { 0.0 } else { g[i] })
                        .collect();
                    send(*b, gb);
                }
            }
            Op::Fill(x, mask) => {
                let (len, c) = (out.len(), out.cols());
                let gx = (0..len)
                    .map(|i| if broadcast_mask(mask, len, c, i) { 0.0 } else { g[i] })
                    .collect();
                send(*x, gx);
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut gx = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let rows = out.rows();
                let gv = self.value(*gain).data();
                if needs(*x) {
                    let mut gx = vec![0.0; out.len()];
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..c).map(|j| g[r * c + j] * gv[j]).collect();
                        let h = &xhat[r * c..(r + 1) * c];
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghh = gh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = inv_std[r] * (gh[j] - mean_gh - h[j] * mean_ghh);
                        }
                    }
                    send(*x, gx);
                }
                if needs(*gain) {
                    let mut gg = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        gg[i % c] += v * xhat[i];
                    }
                    send(*gain, gg);
                }
                if needs(*bias) {
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    send(*bias, gb);
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let gx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                send(*x, gx);
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                send(*x, gx);
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                let gx = g.iter().zip(tx.data()).map(|(gv, v)| gv / v).collect();
                send(*x, gx);
            }
            Op::Square(x) => {
                let tx = self.value(*x);
                let gx = g.iter().zip(tx.data()).map(|(gv, v)| 2.0 * gv * v).collect();
                send(*x, gx);
            }
            Op::Dropout(x, scale) => {
                send(*x, g.iter().zip(scale).map(|(a, b)| a * b).collect());
            }
            Op::MinOf(xs, arg) => send(xs[*arg], vec![g[0]]),
            Op::ClampMax(x, c) => {
                let tx = self.value(*x);
                let gx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, v)| if v <= c { *gv } else { 0.0 })
                    .collect();
                send(*x, gx);
            }
            Op::ClampMin(x, c) => {
                let tx = self.value(*x);
                let gx = g
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, v)| if v >= c { *gv } else { 0.0 })
                    .collect();
                send(*x, gx);
            }
            Op::DiagEmbed(x) => {
                let n = out.cols();
                send(*x, (0..n).map(|i| g[i * n + i]).collect());
            }
            Op::LogAbsDet(a, inv_t) => send(*a, inv_t.iter().map(|v| v * g[0]).collect()),
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let contribs = backward(&values, out, g);
                for (v, c) in inputs.iter().zip(contribs) {
                    send(*v, c);
                }
            }
        }
    }
}
