//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation executed through a [`Tape`] appends a node holding its
//! output value and whatever it needs for the backward pass. Node order is a
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//!
//! A tape is confined to one thread; build one per forward pass.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on both sides; requires odd `k`.
    Same,
    /// No padding.
    Valid,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    MulConst(Var, Rc<[f64]>),
    Affine(Var, f64),
    MaskRows(Var, Rc<[bool]>),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        window: usize,
        heads: usize,
        scale: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddBias(a, b) | MatMul(a, b) => {
                vec![*a, *b]
            }
            MulConst(a, _) | Affine(a, _) | MaskRows(a, _) | Relu(a) | Gelu(a) | Sigmoid(a)
            | Ln(a) | Powf(a, _) | Clamp(a, _, _) | Sum(a) | Reshape(a) | Transpose(a)
            | SliceRows(a, _) | SliceCols(a, _) | RepeatRows(a, _) | Softmax(a) => vec![*a],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv1d { x, kernel, .. } => vec![*x, *kernel],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar loss with respect to every leaf that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    replayed: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Adds the gradient of `v` into `target`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    /// Number of non-leaf operations visited by the reverse sweep.
    pub fn replayed_ops(&self) -> usize {
        self.replayed
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Masked, max-stabilised softmax of one row in place. Returns false if
/// every position is masked.
fn softmax_row(row: &mut [f64], keep: impl Fn(usize) -> bool) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if keep(j) && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= sum);
    true
}

/// Windowed multi-head scaled dot-product attention over `t × d` inputs.
///
/// Returns the output and the attention probabilities, laid out window by
/// window, head by head, as `n × n` row-major blocks (`n` = window length).
pub(crate) fn windowed_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    key_mask: &[bool],
    window: usize,
    heads: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let mut out = vec![0.0; t * d];
    let mut probs = Vec::new();
    let mut scores = Vec::with_capacity(window);
    for start in (0..t).step_by(window) {
        let n = window.min(t - start);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let qi = &q[(start + i) * d..][cols.clone()];
                scores.clear();
                scores.extend((0..n).map(|j| {
                    let kj = &k[(start + j) * d..][cols.clone()];
                    scale * dot(qi, kj)
                }));
                softmax_row(&mut scores, |j| key_mask[start + j]);
                let oi = &mut out[(start + i) * d..][cols.clone()];
                for (j, &p) in scores.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vj = &v[(start + j) * d..][cols.clone()];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
    }
    (out, probs)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push_unchecked(t.clone(), Op::Leaf, needs_grad)
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push_unchecked(t.clone(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn push_unchecked(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|p| nodes[p.0].needs_grad)
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn elementwise2(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Error::shape(name, ta.shape(), tb.shape()));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            (ta.shape().to_vec(), data)
        };
        self.push(name, shape, data, op)
    }

    fn elementwise1(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            (t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        };
        self.push(name, shape, data, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`d` bias to every row of a `t × d` matrix.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            let d = tx.cols();
            if tx.shape().len() != 2 || tb.len() != d {
                return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
            }
            let data = tx
                .data()
                .chunks(d)
                .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
                .collect();
            (tx.shape().to_vec(), data)
        };
        self.push("add_bias", shape, data, Op::AddBias(x, bias))
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&self, x: Var, c: &[f64]) -> Result<Var> {
        let c: Rc<[f64]> = Rc::from(c);
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.len() != c.len() {
                return Err(Error::shape("mul_const", tx.shape(), &[c.len()]));
            }
            let data = tx.data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
            (tx.shape().to_vec(), data)
        };
        self.push("mul_const", shape, data, Op::MulConst(x, c))
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.elementwise1("affine", x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// Sets rows whose mask entry is false to exactly zero.
    pub fn mask_rows(&self, x: Var, mask: &[bool]) -> Result<Var> {
        let mask: Rc<[bool]> = Rc::from(mask);
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.rows() != mask.len() {
                return Err(Error::shape("mask_rows", tx.shape(), &[mask.len()]));
            }
            let d = tx.cols();
            let mut data = tx.data().to_vec();
            for (row, keep) in data.chunks_mut(d).zip(mask.iter()) {
                if !keep {
                    row.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            (tx.shape().to_vec(), data)
        };
        self.push("mask_rows", shape, data, Op::MaskRows(x, mask))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.elementwise1("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.elementwise1("gelu", x, gelu_scalar, Op::Gelu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.elementwise1("sigmoid", x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn ln(&self, x: Var) -> Result<Var> {
        self.elementwise1("ln", x, f64::ln, Op::Ln(x))
    }

    pub fn powf(&self, x: Var, p: f64) -> Result<Var> {
        self.elementwise1("powf", x, |v| v.powf(p), Op::Powf(x, p))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.elementwise1("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let data = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if shape.iter().product::<usize>() != tx.len() {
                return Err(Error::shape("reshape", tx.shape(), &shape));
            }
            tx.data().to_vec()
        };
        self.push("reshape", shape, data, Op::Reshape(x))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, n, data) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            (m, n, matmul_kernel(ta.data(), tb.data(), m, k, n))
        };
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (r, c, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 {
                return Err(Error::shape("transpose", t.shape(), &[]));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = t.data()[i * c + j];
                }
            }
            (r, c, out)
        };
        self.push("transpose", vec![c, r], data, Op::Transpose(x))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 || start + len > t.rows() {
                return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
            }
            let d = t.cols();
            (vec![len, d], t.data()[start * d..(start + len) * d].to_vec())
        };
        self.push("slice_rows", shape, data, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 || start + len > t.cols() {
                return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
            }
            let data = t
                .data()
                .chunks(t.cols())
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            (vec![t.rows(), len], data)
        };
        self.push("slice_cols", shape, data, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
            let rows = nodes[first.0].value.rows();
            let mut width = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape().len() != 2 || t.rows() != rows {
                    return Err(Error::shape("concat_cols", nodes[first.0].value.shape(), t.shape()));
                }
                width += t.cols();
            }
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            (vec![rows, width], data)
        };
        self.push("concat_cols", shape, data, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
            let cols = nodes[first.0].value.cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape().len() != 2 || t.cols() != cols {
                    return Err(Error::shape("concat_rows", nodes[first.0].value.shape(), t.shape()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            (vec![rows, cols], data)
        };
        self.push("concat_rows", shape, data, Op::ConcatRows(parts.to_vec()))
    }

    /// Nearest-neighbour temporal upsampling: output row `t` copies input row
    /// `t / factor`, for `t < out_len`.
    pub fn repeat_rows(&self, x: Var, factor: usize, out_len: usize) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if factor == 0 || out_len > t.rows() * factor || out_len + factor <= t.rows() * factor {
                return Err(Error::shape("repeat_rows", t.shape(), &[factor, out_len]));
            }
            let d = t.cols();
            let mut data = Vec::with_capacity(out_len * d);
            for r in 0..out_len {
                data.extend_from_slice(t.row(r / factor));
            }
            let mut shape = t.shape().to_vec();
            shape[0] = out_len;
            (shape, data)
        };
        self.push("repeat_rows", shape, data, Op::RepeatRows(x, factor))
    }

    /// Softmax over the last dimension. Positions where `mask` is false get
    /// probability exactly zero; `mask` (if given) applies to every row.
    pub fn softmax_lastdim(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let n = *t.shape().last().unwrap_or(&1);
            if n == 0 {
                return Err(Error::shape("softmax_lastdim", t.shape(), &[]));
            }
            if let Some(m) = mask {
                if m.len() != n {
                    return Err(Error::shape("softmax_lastdim", t.shape(), &[m.len()]));
                }
            }
            let mut data = t.data().to_vec();
            for (r, row) in data.chunks_mut(n).enumerate() {
                if !softmax_row(row, |j| mask.is_none_or(|m| m[j])) {
                    return Err(Error::DegenerateRow { row: r });
                }
            }
            (t.shape().to_vec(), data)
        };
        self.push("softmax_lastdim", shape, data, Op::Softmax(x))
    }

    /// Row-wise layer normalisation with affine gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (shape, data, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let d = tx.cols();
            if tx.shape().len() != 2 || d == 0 || tg.len() != d || tb.len() != d {
                return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
            }
            let mut out = Vec::with_capacity(tx.len());
            let mut xhat = Vec::with_capacity(tx.len());
            let mut rstd = Vec::with_capacity(tx.rows());
            for row in tx.data().chunks(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd.push(r);
                for (j, v) in row.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * tg.data()[j] + tb.data()[j]);
                }
            }
            (tx.shape().to_vec(), out, xhat, rstd)
        };
        self.push(
            "layer_norm",
            shape,
            data,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Temporal convolution of a `t × d_in` sequence with a `k × d_in × d_out`
    /// kernel. `Same` padding with stride `s` yields `ceil(t / s)` outputs.
    pub fn conv1d(&self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (shape, data, pad) = {
            let nodes = self.nodes.borrow();
            let (tx, tk) = (&nodes[x.0].value, &nodes[kernel.0].value);
            if tx.shape().len() != 2 || tk.shape().len() != 3 || tk.shape()[1] != tx.shape()[1] {
                return Err(Error::shape("conv1d", tx.shape(), tk.shape()));
            }
            if !(stride == 1 || stride == 2) {
                return Err(Error::InvalidArgument(format!("conv1d stride {stride} not in {{1, 2}}")));
            }
            let (t, din) = (tx.shape()[0], tx.shape()[1]);
            let (k, dout) = (tk.shape()[0], tk.shape()[2]);
            let (pad, out_len) = match padding {
                Padding::Same => {
                    if k % 2 == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "conv1d same padding needs an odd kernel, got {k}"
                        )));
                    }
                    ((k - 1) / 2, t.div_ceil(stride))
                }
                Padding::Valid => {
                    if t < k {
                        return Err(Error::shape("conv1d", tx.shape(), tk.shape()));
                    }
                    (0, (t - k) / stride + 1)
                }
            };
            let mut out = vec![0.0; out_len * dout];
            for o in 0..out_len {
                let orow = &mut out[o * dout..(o + 1) * dout];
                for j in 0..k {
                    let Some(r) = (o * stride + j).checked_sub(pad).filter(|&r| r < t) else {
                        continue;
                    };
                    let xrow = &tx.data()[r * din..(r + 1) * din];
                    let kj = &tk.data()[j * din * dout..(j + 1) * din * dout];
                    for (c, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (ov, kv) in orow.iter_mut().zip(&kj[c * dout..(c + 1) * dout]) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
            (vec![out_len, dout], out, pad)
        };
        self.push(
            "conv1d",
            shape,
            data,
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Multi-head attention restricted to consecutive non-overlapping windows
    /// of `window` rows (the last window may be shorter). Keys whose mask
    /// entry is false get zero weight; a window without valid keys yields zeros.
    pub fn windowed_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        window: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (shape, out, probs) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            if tq.shape().len() != 2 || tq.shape() != tk.shape() || tq.shape() != tv.shape() {
                return Err(Error::shape("windowed_attention", tq.shape(), tk.shape()));
            }
            let (t, d) = (tq.shape()[0], tq.shape()[1]);
            if key_mask.len() != t {
                return Err(Error::shape("windowed_attention", tq.shape(), &[key_mask.len()]));
            }
            if window == 0 || heads == 0 || d % heads != 0 {
                return Err(Error::InvalidArgument(format!(
                    "attention window {window} / heads {heads} invalid for width {d}"
                )));
            }
            let (out, probs) = windowed_attention_forward(
                tq.data(),
                tk.data(),
                tv.data(),
                t,
                d,
                key_mask,
                window,
                heads,
                scale,
            );
            (vec![t, d], out, probs)
        };
        self.push(
            "windowed_attention",
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                window,
                heads,
                scale,
            },
        )
    }

    /// Runs the reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.into_inner();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss { shape: loss_shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut replayed = 0;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            replayed += 1;
            backprop(&nodes, i, &g, &mut grads);
        }

        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if node.needs_grad {
                    grads[i].get_or_insert_with(|| vec![0.0; node.value.len()]);
                } else {
                    grads[i] = None;
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, replayed })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: impl Iterator<Item = f64>) {
    if let Some(s) = slot(grads, nodes, v) {
        s.iter_mut().zip(contrib).for_each(|(a, b)| *a += b);
    }
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, g.iter().copied());
            acc(grads, nodes, *b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, g.iter().copied());
            acc(grads, nodes, *b, g.iter().map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc(grads, nodes, *a, g.iter().zip(vb).map(|(g, y)| g * y));
            acc(grads, nodes, *b, g.iter().zip(va).map(|(g, x)| g * x));
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc(grads, nodes, *a, g.iter().zip(vb).map(|(g, y)| g / y));
            acc(
                grads,
                nodes,
                *b,
                g.iter().zip(va.iter().zip(vb)).map(|(g, (x, y))| -g * x / (y * y)),
            );
        }
        Op::AddBias(x, b) => {
            acc(grads, nodes, *x, g.iter().copied());
            if let Some(s) = slot(grads, nodes, *b) {
                let d = s.len();
                for row in g.chunks(d) {
                    s.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
            }
        }
        Op::MulConst(x, c) => acc(grads, nodes, *x, g.iter().zip(c.iter()).map(|(g, c)| g * c)),
        Op::Affine(x, s) => acc(grads, nodes, *x, g.iter().map(|g| g * s)),
        Op::MaskRows(x, mask) => {
            let d = out.cols();
            acc(
                grads,
                nodes,
                *x,
                g.iter()
                    .enumerate()
                    .map(|(k, g)| if mask[k / d] { *g } else { 0.0 }),
            );
        }
        Op::Relu(x) => {
            let vx = val(*x).data();
            acc(grads, nodes, *x, g.iter().zip(vx).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }));
        }
        Op::Gelu(x) => {
            let vx = val(*x).data();
            acc(grads, nodes, *x, g.iter().zip(vx).map(|(g, x)| g * gelu_grad(*x)));
        }
        Op::Sigmoid(x) => {
            acc(grads, nodes, *x, g.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)));
        }
        Op::Ln(x) => {
            let vx = val(*x).data();
            acc(grads, nodes, *x, g.iter().zip(vx).map(|(g, x)| g / x));
        }
        Op::Powf(x, p) => {
            let vx = val(*x).data();
            acc(grads, nodes, *x, g.iter().zip(vx).map(|(g, x)| g * p * x.powf(p - 1.0)));
        }
        Op::Clamp(x, lo, hi) => {
            let vx = val(*x).data();
            acc(
                grads,
                nodes,
                *x,
                g.iter()
                    .zip(vx)
                    .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 }),
            );
        }
        Op::Sum(x) => {
            let n = val(*x).len();
            acc(grads, nodes, *x, std::iter::repeat_n(g[0], n));
        }
        Op::Reshape(x) => acc(grads, nodes, *x, g.iter().copied()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(s) = slot(grads, nodes, *a) {
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        s[r * k + p] += dot(grow, &tb.data()[p * n..(p + 1) * n]);
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *b) {
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let av = ta.data()[r * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (sv, gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *sv += av * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            // out is c × r; input is r × c
            let (c, r) = (out.shape()[0], out.shape()[1]);
            if let Some(s) = slot(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::SliceRows(x, start) => {
            let d = out.cols();
            if let Some(s) = slot(grads, nodes, *x) {
                s[start * d..start * d + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        Op::SliceCols(x, start) => {
            let len = out.cols();
            let full = val(*x).cols();
            if let Some(s) = slot(grads, nodes, *x) {
                for (r, grow) in g.chunks(len).enumerate() {
                    s[r * full + start..r * full + start + len]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let width = out.cols();
            let mut offset = 0;
            for p in parts {
                let pc = val(*p).cols();
                if let Some(s) = slot(grads, nodes, *p) {
                    for (r, grow) in g.chunks(width).enumerate() {
                        s[r * pc..(r + 1) * pc]
                            .iter_mut()
                            .zip(&grow[offset..offset + pc])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).len();
                acc(grads, nodes, *p, g[offset..offset + n].iter().copied());
                offset += n;
            }
        }
        Op::RepeatRows(x, factor) => {
            let d = out.cols();
            if let Some(s) = slot(grads, nodes, *x) {
                for (r, grow) in g.chunks(d).enumerate() {
                    let src = r / factor;
                    s[src * d..(src + 1) * d]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Softmax(x) => {
            let n = *out.shape().last().unwrap_or(&1);
            if let Some(s) = slot(grads, nodes, *x) {
                for ((srow, prow), grow) in s.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                    let inner = dot(prow, grow);
                    for ((sv, p), gv) in srow.iter_mut().zip(prow).zip(grow) {
                        *sv += p * (gv - inner);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = out.cols();
            let gv = val(*gain).data();
            if let Some(s) = slot(grads, nodes, *gain) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        s[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *bias) {
                for grow in g.chunks(d) {
                    s.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(s) = slot(grads, nodes, *x) {
                let mut dh = vec![0.0; d];
                for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        dh[j] = grow[j] * gv[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dhh = dot(&dh, hrow) / d as f64;
                    for j in 0..d {
                        s[r * d + j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                    }
                }
            }
        }
        Op::Conv1d {
            x,
            kernel,
            stride,
            pad,
        } => {
            let (tx, tk) = (val(*x), val(*kernel));
            let (t, din) = (tx.shape()[0], tx.shape()[1]);
            let (k, dout) = (tk.shape()[0], tk.shape()[2]);
            let out_len = out.shape()[0];
            let rows = |o: usize, j: usize| (o * stride + j).checked_sub(*pad).filter(|&r| r < t);
            if let Some(s) = slot(grads, nodes, *x) {
                for o in 0..out_len {
                    let grow = &g[o * dout..(o + 1) * dout];
                    for j in 0..k {
                        let Some(r) = rows(o, j) else { continue };
                        let kj = &tk.data()[j * din * dout..(j + 1) * din * dout];
                        for c in 0..din {
                            s[r * din + c] += dot(grow, &kj[c * dout..(c + 1) * dout]);
                        }
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *kernel) {
                for o in 0..out_len {
                    let grow = &g[o * dout..(o + 1) * dout];
                    for j in 0..k {
                        let Some(r) = rows(o, j) else { continue };
                        let xrow = &tx.data()[r * din..(r + 1) * din];
                        for (c, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let base = (j * din + c) * dout;
                            for (sv, gv) in s[base..base + dout].iter_mut().zip(grow) {
                                *sv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            probs,
            window,
            heads,
            scale,
        } => {
            let (tq, tk, tv) = (val(*q).data(), val(*k).data(), val(*v).data());
            let (t, d) = (out.shape()[0], out.shape()[1]);
            let dh = d / heads;
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = Vec::with_capacity(*window);
            let mut offset = 0;
            for start in (0..t).step_by(*window) {
                let n = (*window).min(t - start);
                for h in 0..*heads {
                    let c0 = h * dh;
                    for i in 0..n {
                        let row = start + i;
                        let p = &probs[offset..offset + n];
                        offset += n;
                        let gi = &g[row * d + c0..row * d + c0 + dh];
                        dp.clear();
                        dp.extend((0..n).map(|j| {
                            let vj = &tv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                            dot(gi, vj)
                        }));
                        let inner = dot(p, &dp);
                        for j in 0..n {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let col = start + j;
                            for c in 0..dh {
                                dv[col * d + c0 + c] += p[j] * gi[c];
                            }
                            let ds = p[j] * (dp[j] - inner) * scale;
                            for c in 0..dh {
                                dq[row * d + c0 + c] += ds * tk[col * d + c0 + c];
                                dk[col * d + c0 + c] += ds * tq[row * d + c0 + c];
                            }
                        }
                    }
                }
            }
            acc(grads, nodes, *q, dq.into_iter());
            acc(grads, nodes, *k, dk.into_iter());
            acc(grads, nodes, *v, dv.into_iter());
        }
    }
}
