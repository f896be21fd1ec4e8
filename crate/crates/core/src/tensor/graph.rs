//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes are only ever appended, so the node
//! vector is a topological order and `backward` walks it in reverse.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use super::dense::{gemm_acc, gemm_nt_acc, gemm_tn_acc, split_axis};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive identifiers, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    MulScalar,
    Scale,
    Exp,
    Sigmoid,
    Relu,
    SquaredRelu,
    MatMul,
    BatchMatMul,
    Softmax,
    Sum,
    Mean,
    SumAll,
    MeanAll,
    Reshape,
    Permute,
    Slice,
    Concat,
    BroadcastLeading,
    AvgPool,
    LayerNorm,
    Wkv,
}

const OP_NAMES: &[(OpKind, &str)] = &[
    (OpKind::Leaf, "leaf"),
    (OpKind::Add, "add"),
    (OpKind::Sub, "sub"),
    (OpKind::Mul, "mul"),
    (OpKind::AddRow, "add_row"),
    (OpKind::MulRow, "mul_row"),
    (OpKind::MulScalar, "mul_scalar"),
    (OpKind::Scale, "scale"),
    (OpKind::Exp, "exp"),
    (OpKind::Sigmoid, "sigmoid"),
    (OpKind::Relu, "relu"),
    (OpKind::SquaredRelu, "squared_relu"),
    (OpKind::MatMul, "matmul"),
    (OpKind::BatchMatMul, "bmm"),
    (OpKind::Softmax, "softmax"),
    (OpKind::Sum, "sum"),
    (OpKind::Mean, "mean"),
    (OpKind::SumAll, "sum_all"),
    (OpKind::MeanAll, "mean_all"),
    (OpKind::Reshape, "reshape"),
    (OpKind::Permute, "permute"),
    (OpKind::Slice, "slice"),
    (OpKind::Concat, "concat"),
    (OpKind::BroadcastLeading, "broadcast"),
    (OpKind::AvgPool, "avg_pool"),
    (OpKind::LayerNorm, "layer_norm"),
    (OpKind::Wkv, "wkv"),
];

impl OpKind {
    pub fn name(self) -> &'static str {
        OP_NAMES
            .iter()
            .find(|(k, _)| *k == self)
            .map(|(_, n)| *n)
            .unwrap_or("?")
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OP_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::Usage(format!("unknown op {s}")))
    }
}

enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    SquaredRelu(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Softmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    BroadcastLeading(Var),
    AvgPool(Var, usize),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Wkv { k: Var, v: Var, w: Var, u: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf(_) => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(_) => OpKind::Exp,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::SquaredRelu(_) => OpKind::SquaredRelu,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAll(_) => OpKind::SumAll,
            Op::MeanAll(_) => OpKind::MeanAll,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::BroadcastLeading(_) => OpKind::BroadcastLeading,
            Op::AvgPool(..) => OpKind::AvgPool,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Wkv { .. } => OpKind::Wkv,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Gradients of the loss with respect to every node of a graph.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Records primitive applications for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    fault: Option<OpKind>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Numerically stable streaming evaluation of the RWKV weighted key-value
/// average over `[batch, time, channel]` raw slices.
///
/// `decay[c] ≥ 0` is the per-step decay rate applied to past terms and
/// `bonus[c]` is added to the current step's key. The state carries a
/// numerator, a denominator and their shared max exponent.
pub fn wkv_streaming(
    k: &[f64],
    v: &[f64],
    decay: &[f64],
    bonus: &[f64],
    batch: usize,
    steps: usize,
    channels: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * steps * channels];
    for b in 0..batch {
        for c in 0..channels {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut max_exp = f64::NEG_INFINITY;
            for t in 0..steps {
                let i = (b * steps + t) * channels + c;
                let cur = bonus[c] + k[i];
                let q = max_exp.max(cur);
                let e_state = (max_exp - q).exp();
                let e_cur = (cur - q).exp();
                out[i] = (e_state * num + e_cur * v[i]) / (e_state * den + e_cur);

                let decayed = max_exp - decay[c];
                let q = decayed.max(k[i]);
                let e_state = (decayed - q).exp();
                let e_cur = (k[i] - q).exp();
                num = e_state * num + e_cur * v[i];
                den = e_state * den + e_cur;
                max_exp = q;
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `kind` is deliberately wrong (scaled
    /// by 1.1). Used to prove the gradient checker detects broken rules.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            nodes: RefCell::default(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None))
    }

    /// Leaf bound to a parameter; its gradient is accumulated into the store.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf(Some(id)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        Ok((ta, tb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("add", a, b)?;
        Ok(self.push(elementwise(&ta, &tb, |x, y| x + y), Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("sub", a, b)?;
        Ok(self.push(elementwise(&ta, &tb, |x, y| x - y), Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("mul", a, b)?;
        Ok(self.push(elementwise(&ta, &tb, |x, y| x * y), Op::Mul(a, b)))
    }

    fn row_operands(&self, op: &str, x: Var, row: Var) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.ndim() != 1 || tx.ndim() == 0 || tx.shape()[tx.ndim() - 1] != tr.numel() {
            return Err(shape_err(op, tx.shape(), tr.shape()));
        }
        Ok((tx, tr))
    }

    /// `x + row`, broadcasting a vector over the last axis.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = self.row_operands("add_row", x, row)?;
        let d = tr.numel();
        let r = tr.data();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + r[i % d]);
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// `x ⊙ row`, broadcasting a vector over the last axis.
    pub fn mul_row(&self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = self.row_operands("mul_row", x, row)?;
        let d = tr.numel();
        let r = tr.data();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] * r[i % d]);
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    /// `x · s` for a single-element tensor `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let sv = ts
            .item()
            .ok_or_else(|| shape_err("mul_scalar", tx.shape(), ts.shape()))?;
        Ok(self.push(tx.map(|v| v * sv), Op::MulScalar(x, s)))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// `relu(x)²`.
    pub fn squared_relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let r = v.max(0.0);
            r * r
        });
        self.push(out, Op::SquaredRelu(x))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    /// Batched product `[B×m×k]·[B×k×n] → [B×m×n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_acc(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(Tensor::new(&[bs, m, n], out)?, Op::BatchMatMul(a, b)))
    }

    fn check_axis(&self, op: &str, x: &Tensor, axis: usize) -> Result<()> {
        if axis >= x.ndim() {
            return Err(Error::Shape(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        self.check_axis("softmax", &tx, axis)?;
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::new(tx.shape(), out)?, Op::Softmax(x, axis)))
    }

    fn reduce(&self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let tx = self.value(x);
        self.check_axis(if mean { "mean" } else { "sum" }, &tx, axis)?;
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += tx.data()[(o * n + j) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(Tensor::new(&shape, out)?, op))
    }

    pub fn sum(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let tx = self.value(x);
        let total: f64 = tx.data().iter().sum();
        let n = tx.numel() as f64;
        self.push(Tensor::scalar(total / n), Op::MeanAll(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(x)).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut seen = vec![false; tx.ndim()];
        if perm.len() != tx.ndim()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "permute: {perm:?} is not a permutation of the axes of {:?}",
                tx.shape()
            )));
        }
        let (data, shape) = permute_data(tx.data(), tx.shape(), perm);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Permute(x, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(Error::Shape("transpose needs at least 2 axes".into()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        self.check_axis("slice", &tx, axis)?;
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!(
                "slice: [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &values {
            let mut s = v.shape().to_vec();
            if s.len() != first.ndim() {
                return Err(shape_err("concat", first.shape(), v.shape()));
            }
            shape[axis] += s[axis];
            s[axis] = first.shape()[axis];
            if s != first.shape() {
                return Err(shape_err("concat", first.shape(), v.shape()));
            }
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Repeats `x` along a new leading axis of extent `n`.
    pub fn broadcast_leading(&self, x: Var, n: usize) -> Result<Var> {
        let tx = self.value(x);
        if n == 0 {
            return Err(Error::Shape("broadcast to an empty axis".into()));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(tx.shape());
        let data = tx.data().repeat(n);
        Ok(self.push(Tensor::new(&shape, data)?, Op::BroadcastLeading(x)))
    }

    /// Centered moving average of odd width `k` along the second-to-last
    /// axis (time), replicating the first and last steps at the edges.
    pub fn avg_pool1d_replicate(&self, x: Var, k: usize) -> Result<Var> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("avg pool window must be odd, got {k}")));
        }
        let tx = self.value(x);
        if tx.ndim() < 2 {
            return Err(Error::Shape(format!(
                "avg_pool1d expects [..×T×D], got {:?}",
                tx.shape()
            )));
        }
        let nd = tx.ndim();
        let (steps, chans) = (tx.shape()[nd - 2], tx.shape()[nd - 1]);
        let batches = tx.numel() / (steps * chans);
        let half = (k / 2) as isize;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batches {
            let base = b * steps * chans;
            for t in 0..steps {
                for c in 0..chans {
                    // Mean taken relative to the centre value so constant
                    // windows reproduce their value exactly.
                    let centre = src[base + t * chans + c];
                    let mut acc = 0.0;
                    for off in -half..=half {
                        let s = (t as isize + off).clamp(0, steps as isize - 1) as usize;
                        acc += src[base + s * chans + c] - centre;
                    }
                    out[base + t * chans + c] = centre + acc / k as f64;
                }
            }
        }
        Ok(self.push(Tensor::new(tx.shape(), out)?, Op::AvgPool(x, k)))
    }

    /// Normalizes the last axis to zero mean and unit (population) variance.
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        let rows = tx.numel() / d;
        let mut out = vec![0.0; tx.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        Ok(self.push(Tensor::new(tx.shape(), out)?, Op::LayerNorm { x, inv_std }))
    }

    /// RWKV weighted key-value aggregate over `[B×T×D]` keys and values.
    ///
    /// `w_raw` is the unconstrained decay parameter (effective decay rate
    /// `exp(w_raw)`), `u` the bonus for the current step; both are `[D]`.
    pub fn wkv(&self, k: Var, v: Var, w_raw: Var, u: Var) -> Result<Var> {
        let (tk, tv, tw, tu) = (self.value(k), self.value(v), self.value(w_raw), self.value(u));
        if tk.shape() != tv.shape() || tk.ndim() != 3 {
            return Err(shape_err("wkv", tk.shape(), tv.shape()));
        }
        let (b, t, d) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if tw.shape() != [d] || tu.shape() != [d] {
            return Err(shape_err("wkv", tw.shape(), tu.shape()));
        }
        let decay: Vec<f64> = tw.data().iter().map(|w| w.exp()).collect();
        let out = wkv_streaming(tk.data(), tv.data(), &decay, tu.data(), b, t, d);
        Ok(self.push(Tensor::new(tk.shape(), out)?, Op::Wkv { k, v, w: w_raw, u }))
    }

    /// Reverse pass from a single-element `loss`. Parameter gradients are
    /// added into `store`; parameters not reached keep their gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));
        let mut done: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let factor = if self.fault == Some(node.op.kind()) { 1.1 } else { 1.0 };
            let mut send = |v: Var, mut t: Tensor| {
                if factor != 1.0 {
                    t.data_mut().iter_mut().for_each(|x| *x *= factor);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let gd = g.data();
            match &node.op {
                Op::Leaf(param) => {
                    if let Some(id) = param {
                        store.accumulate(*id, &g);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    send(*a, elementwise(&g, val(*b), |x, y| x * y));
                    send(*b, elementwise(&g, val(*a), |x, y| x * y));
                }
                Op::AddRow(x, row) => {
                    let d = val(*row).numel();
                    let mut gr = vec![0.0; d];
                    for (i, &gv) in gd.iter().enumerate() {
                        gr[i % d] += gv;
                    }
                    send(*x, g.clone());
                    send(*row, Tensor::new(&[d], gr)?);
                }
                Op::MulRow(x, row) => {
                    let (tx, tr) = (val(*x), val(*row));
                    let d = tr.numel();
                    let mut gr = vec![0.0; d];
                    for (i, (&gv, &xv)) in gd.iter().zip(tx.data()).enumerate() {
                        gr[i % d] += gv * xv;
                    }
                    let gx = Tensor::from_fn(tx.shape(), |i| gd[i] * tr.data()[i % d]);
                    send(*x, gx);
                    send(*row, Tensor::new(&[d], gr)?);
                }
                Op::MulScalar(x, s) => {
                    let (tx, ts) = (val(*x), val(*s));
                    let sv = ts.data()[0];
                    let gs: f64 = gd.iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                    send(*x, g.map(|v| v * sv));
                    send(*s, Tensor::new(ts.shape(), vec![gs])?);
                }
                Op::Scale(x, c) => send(*x, g.map(|v| v * c)),
                Op::Exp(x) => send(*x, elementwise(&g, &node.value, |a, y| a * y)),
                Op::Sigmoid(x) => send(*x, elementwise(&g, &node.value, |a, y| a * y * (1.0 - y))),
                Op::Relu(x) => send(*x, elementwise(&g, val(*x), |a, xv| if xv > 0.0 { a } else { 0.0 })),
                Op::SquaredRelu(x) => send(*x, elementwise(&g, val(*x), |a, xv| 2.0 * a * xv.max(0.0))),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(gd, tb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(ta.data(), gd, &mut gb, k, m, n);
                    send(*a, Tensor::new(ta.shape(), ga)?);
                    send(*b, Tensor::new(tb.shape(), gb)?);
                }
                Op::BatchMatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                    let mut ga = vec![0.0; bs * m * k];
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        gemm_nt_acc(
                            gi,
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                        gemm_tn_acc(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            gi,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    send(*a, Tensor::new(ta.shape(), ga)?);
                    send(*b, Tensor::new(tb.shape(), gb)?);
                }
                Op::Softmax(x, axis) => {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    send(*x, Tensor::new(node.value.shape(), gx)?);
                }
                Op::Sum(x, axis) | Op::Mean(x, axis) => {
                    let tx = val(*x);
                    let (outer, n, inner) = split_axis(tx.shape(), *axis);
                    let scale = if matches!(node.op, Op::Mean(..)) {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    let gx = Tensor::from_fn(tx.shape(), |idx| {
                        let o = idx / (n * inner);
                        let i = idx % inner;
                        gd[o * inner + i] * scale
                    });
                    debug_assert_eq!(outer * n * inner, tx.numel());
                    send(*x, gx);
                }
                Op::SumAll(x) => send(*x, Tensor::full(val(*x).shape(), gd[0])),
                Op::MeanAll(x) => {
                    let tx = val(*x);
                    send(*x, Tensor::full(tx.shape(), gd[0] / tx.numel() as f64));
                }
                Op::Reshape(x) => send(*x, g.clone().reshaped(val(*x).shape())?),
                Op::Permute(x, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (data, shape) = permute_data(gd, g.shape(), &inv);
                    send(*x, Tensor::new(&shape, data)?);
                }
                Op::Slice { x, axis, start } => {
                    let tx = val(*x);
                    let (outer, n, inner) = split_axis(tx.shape(), *axis);
                    let len = g.shape()[*axis];
                    let mut gx = vec![0.0; tx.numel()];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                    }
                    send(*x, Tensor::new(tx.shape(), gx)?);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(g.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let tp = val(p);
                        let len = tp.shape()[*axis];
                        let mut gp = Vec::with_capacity(tp.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        offset += len;
                        send(p, Tensor::new(tp.shape(), gp)?);
                    }
                }
                Op::BroadcastLeading(x) => {
                    let tx = val(*x);
                    let n = tx.numel();
                    let mut gx = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (a, b) in gx.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    send(*x, Tensor::new(tx.shape(), gx)?);
                }
                Op::AvgPool(x, k) => {
                    let tx = val(*x);
                    let nd = tx.ndim();
                    let (steps, chans) = (tx.shape()[nd - 2], tx.shape()[nd - 1]);
                    let half = (*k / 2) as isize;
                    let w = 1.0 / *k as f64;
                    let mut gx = vec![0.0; tx.numel()];
                    for b in 0..tx.numel() / (steps * chans) {
                        let base = b * steps * chans;
                        for t in 0..steps {
                            for c in 0..chans {
                                let gv = gd[base + t * chans + c] * w;
                                for off in -half..=half {
                                    let s = (t as isize + off).clamp(0, steps as isize - 1) as usize;
                                    gx[base + s * chans + c] += gv;
                                }
                            }
                        }
                    }
                    send(*x, Tensor::new(tx.shape(), gx)?);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let mut gx = vec![0.0; y.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gy = &gd[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mean_g = gy.iter().sum::<f64>() / d as f64;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv * (gy[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    send(*x, Tensor::new(node.value.shape(), gx)?);
                }
                Op::Wkv { k, v, w, u } => {
                    let (gk, gv, gw, gu) = wkv_backward(val(*k), val(*v), val(*w), val(*u), gd);
                    send(*k, gk);
                    send(*v, gv);
                    send(*w, gw);
                    send(*u, gu);
                }
            }
            done[idx] = Some(g);
        }
        Ok(Grads { grads: done })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Backward of the wkv aggregate via its softmax form: step `t` is a
/// softmax-weighted mean of `v_1..v_t` with logits `-(t-1-i)·decay + k_i`
/// for `i < t` and `u + k_t` for `i = t`.
fn wkv_backward(k: &Tensor, v: &Tensor, w_raw: &Tensor, u: &Tensor, g: &[f64]) -> (Tensor, Tensor, Tensor, Tensor) {
    let (b, steps, d) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let (kd, vd) = (k.data(), v.data());
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut gdecay = vec![0.0; d];
    let mut gu = vec![0.0; d];
    let mut logits = vec![0.0; steps];
    for bi in 0..b {
        for c in 0..d {
            let decay = w_raw.data()[c].exp();
            let at = |t: usize| (bi * steps + t) * d + c;
            for t in 0..steps {
                for i in 0..t {
                    logits[i] = -((t - 1 - i) as f64) * decay + kd[at(i)];
                }
                logits[t] = u.data()[c] + kd[at(t)];
                let max = logits[..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in &mut logits[..=t] {
                    *l = (*l - max).exp();
                    total += *l;
                }
                let mut mean = 0.0;
                for (i, p) in logits[..=t].iter_mut().enumerate() {
                    *p /= total;
                    mean += *p * vd[at(i)];
                }
                let gt = g[at(t)];
                for i in 0..=t {
                    let p = logits[i];
                    gv[at(i)] += gt * p;
                    let ge = gt * p * (vd[at(i)] - mean);
                    gk[at(i)] += ge;
                    if i == t {
                        gu[c] += ge;
                    } else {
                        gdecay[c] -= ge * (t - 1 - i) as f64;
                    }
                }
            }
        }
    }
    let gw: Vec<f64> = gdecay.iter().zip(w_raw.data()).map(|(gd, w)| gd * w.exp()).collect();
    (
        Tensor::new(k.shape(), gk).expect("shape"),
        Tensor::new(v.shape(), gv).expect("shape"),
        Tensor::new(&[d], gw).expect("shape"),
        Tensor::new(&[d], gu).expect("shape"),
    )
}
