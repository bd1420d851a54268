//! Reverse-mode differentiation over a recorded op graph.
//!
//! A [`Graph`] is built node by node (every node only references earlier
//! nodes), evaluated by [`forward`] into a [`Tape`], and differentiated by
//! [`backward`]. Values are `f32`; every reduction and every gradient
//! accumulates in `f64` and is cast back at the end.
//!
//! Taps registered with [`Graph::register_tap`] expose both the value of a
//! node and, after backward, the gradient of the loss with respect to it.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TapHandle(NodeId);

impl TapHandle {
    pub fn node(&self) -> NodeId {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Const,
    MatMul,
    Add,
    Mul,
    Scale,
    Concat,
    Slice,
    Mean,
    LayerNorm,
    Gelu,
    Gather,
    Softmax,
    SoftmaxCrossEntropy,
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Tensor looked up by name in the bindings; differentiable when the bound tensor is trainable.
    Input(String),
    /// Inline non-trainable data.
    Const(Tensor),
    /// `a · b`, or `a · bᵀ` when `transpose_b`. A rank-1 `a` is a single row and yields a rank-1 result.
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    /// Elementwise sum; `b` may be a rank-1 row broadcast over the rows of `a`.
    Add(NodeId, NodeId),
    /// Elementwise product; `b` may be a rank-1 row broadcast over the rows of `a`.
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    /// Concatenation of rank-2 tensors along axis 0 (rows) or 1 (columns).
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, len: usize },
    /// Mean of all elements, shape `[1]`.
    Mean(NodeId),
    /// Row-wise layer normalisation with affine `gamma`, `beta` of shape `[cols]`.
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    /// Tanh-approximated GELU.
    Gelu(NodeId),
    /// Rows of `table` selected by `ids`.
    Gather { table: NodeId, ids: Vec<usize> },
    /// Row-wise softmax. Column `c` of row `r` is visible iff `c < prefix || c <= r`;
    /// `prefix >= cols` gives an unmasked softmax, `prefix == 0` a causal one.
    Softmax { x: NodeId, prefix: usize },
    /// Mean over rows of `-log softmax(logits)[target]`, shape `[1]`.
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input(_) => OpKind::Input,
            Op::Const(_) => OpKind::Const,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Mean(_) => OpKind::Mean,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Gather { .. } => OpKind::Gather,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Const(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Mean(a) | Op::Gelu(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } => vec![*input],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Gather { table, .. } => vec![*table],
            Op::Softmax { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Named tensors referenced by [`Op::Input`] nodes.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

/// Empty bindings for graphs made only of constants.
pub struct NoBindings;

impl Bindings for NoBindings {
    fn lookup(&self, _name: &str) -> Option<&Tensor> {
        None
    }
}

impl Bindings for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    taps: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ops(&self) -> &[Op] {
        &self.nodes
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, transpose_b: false })
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, transpose_b: true })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn concat(&mut self, inputs: Vec<NodeId>, axis: usize) -> NodeId {
        self.push(Op::Concat { inputs, axis })
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        self.push(Op::Slice { input, axis, start, len })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Gather { table, ids })
    }

    pub fn softmax(&mut self, x: NodeId, prefix: usize) -> NodeId {
        self.push(Op::Softmax { x, prefix })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, targets })
    }

    /// Marks `node` so that forward captures its value and backward its gradient.
    /// Tapping the same node twice yields the same handle.
    pub fn register_tap(&mut self, node: NodeId) -> Result<TapHandle> {
        if node.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(node.0));
        }
        if !self.taps.contains(&node) {
            self.taps.push(node);
        }
        Ok(TapHandle(node))
    }

    pub fn taps(&self) -> &[NodeId] {
        &self.taps
    }
}

#[derive(Debug)]
enum Aux {
    None,
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { probs: Vec<f64> },
    CrossEntropy { probs: Vec<f64>, loss: f64 },
}

/// Record of one forward evaluation.
pub struct Tape<'a> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Tensor>>,
    aux: Vec<Aux>,
    needs_grad: Vec<bool>,
    tapped: Vec<bool>,
    tap_grads: BTreeMap<NodeId, Tensor>,
    consumed: bool,
}

impl std::fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.values.len()).field("consumed", &self.consumed).finish()
    }
}

impl<'a> Tape<'a> {
    pub fn value(&self, node: NodeId) -> Result<&Tensor> {
        self.values.get(node.0).map(|v| v.as_ref()).ok_or(Error::UnknownNode(node.0))
    }

    /// Loss value of a cross-entropy node at full `f64` precision.
    pub fn loss_f64(&self, node: NodeId) -> Result<f64> {
        match self.aux.get(node.0) {
            Some(Aux::CrossEntropy { loss, .. }) => Ok(*loss),
            Some(_) => Ok(self.value(node)?.item() as f64),
            None => Err(Error::UnknownNode(node.0)),
        }
    }

    pub fn output(&self) -> &Tensor {
        self.values.last().expect("empty tape").as_ref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn is_tapped(&self, handle: TapHandle) -> bool {
        self.tapped.get(handle.0 .0).copied().unwrap_or(false)
    }

    /// Activation captured for `handle`.
    pub fn tap_value(&self, handle: TapHandle) -> Result<&Tensor> {
        if !self.is_tapped(handle) {
            return Err(Error::NotPopulated);
        }
        self.value(handle.0)
    }

    /// Gradient captured for `handle`; only available after [`backward`].
    pub fn tap_gradient(&self, handle: TapHandle) -> Result<&Tensor> {
        if !self.is_tapped(handle) {
            return Err(Error::NotPopulated);
        }
        self.tap_grads.get(&handle.0).ok_or(Error::NotPopulated)
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

fn shape_err(i: usize, op: &Op, shapes: Vec<Vec<usize>>) -> Error {
    Error::ShapeMismatch { op_index: i, op: op.kind(), shapes }
}

/// Evaluates every node of `graph` in order. Returns the value of the last node and the tape.
pub fn forward<'a>(graph: &'a Graph, bindings: &'a dyn Bindings) -> Result<(Tensor, Tape<'a>)> {
    if graph.is_empty() {
        return Err(Error::InvalidGraph("empty graph".into()));
    }
    let n = graph.len();
    let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(n);
    let mut aux = Vec::with_capacity(n);
    let mut needs_grad = vec![false; n];
    let mut tapped = vec![false; n];
    for t in &graph.taps {
        tapped[t.0] = true;
    }

    for (i, op) in graph.nodes.iter().enumerate() {
        for operand in op.operands() {
            if operand.0 >= i {
                return Err(Error::InvalidGraph(format!(
                    "op {i} references node {} which does not precede it",
                    operand.0
                )));
            }
        }
        let (value, extra) = eval_op(i, op, &values, bindings)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op_index: i, op: op.kind() });
        }
        needs_grad[i] = tapped[i]
            || match op {
                Op::Input(_) => value.trainable(),
                Op::Const(_) => false,
                _ => op.operands().iter().any(|o| needs_grad[o.0]),
            };
        values.push(value);
        aux.push(extra);
    }

    let out = values.last().expect("non-empty").as_ref().clone();
    Ok((
        out,
        Tape {
            graph,
            values,
            aux,
            needs_grad,
            tapped,
            tap_grads: BTreeMap::new(),
            consumed: false,
        },
    ))
}

fn matrix_dims(t: &Tensor) -> Option<(usize, usize)> {
    t.as_matrix()
}

fn eval_op<'a>(
    i: usize,
    op: &'a Op,
    values: &[Cow<'a, Tensor>],
    bindings: &'a dyn Bindings,
) -> Result<(Cow<'a, Tensor>, Aux)> {
    let v = |id: &NodeId| values[id.0].as_ref();
    let owned = |t: Tensor| Ok((Cow::Owned(t), Aux::None));
    match op {
        Op::Input(name) => {
            let t = bindings.lookup(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
            Ok((Cow::Borrowed(t), Aux::None))
        }
        Op::Const(t) => Ok((Cow::Borrowed(t), Aux::None)),
        Op::MatMul { a, b, transpose_b } => {
            let (ta, tb) = (v(a), v(b));
            let bad = || shape_err(i, op, vec![ta.shape().to_vec(), tb.shape().to_vec()]);
            let (m, k) = matrix_dims(ta).ok_or_else(bad)?;
            if tb.rank() != 2 {
                return Err(bad());
            }
            let (br, bc) = (tb.shape()[0], tb.shape()[1]);
            let (kb, n) = if *transpose_b { (bc, br) } else { (br, bc) };
            if kb != k {
                return Err(bad());
            }
            let mut out = vec![0.0f32; m * n];
            if *transpose_b {
                matmul_nt(ta.data(), tb.data(), m, k, n, &mut out);
            } else {
                matmul_nn(ta.data(), tb.data(), m, k, n, &mut out);
            }
            let shape = if ta.rank() == 1 { vec![n] } else { vec![m, n] };
            owned(Tensor::new(shape, out)?)
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let is_add = matches!(op, Op::Add(..));
            let combine = |x: f32, y: f32| if is_add { x + y } else { x * y };
            let out: Vec<f32> = if ta.shape() == tb.shape() {
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| combine(x, y)).collect()
            } else if tb.rank() == 1 && ta.rank() == 2 && ta.shape()[1] == tb.shape()[0] {
                let cols = tb.numel();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| combine(x, tb.data()[j % cols]))
                    .collect()
            } else {
                return Err(shape_err(i, op, vec![ta.shape().to_vec(), tb.shape().to_vec()]));
            };
            owned(Tensor::new(ta.shape().to_vec(), out)?)
        }
        Op::Scale(a, s) => {
            let ta = v(a);
            owned(Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())?)
        }
        Op::Concat { inputs, axis } => {
            if inputs.is_empty() {
                return Err(shape_err(i, op, vec![]));
            }
            let ts: Vec<&Tensor> = inputs.iter().map(v).collect();
            let shapes = || ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
            if *axis > 1 || ts.iter().any(|t| t.rank() != 2) {
                return Err(shape_err(i, op, shapes()));
            }
            if *axis == 0 {
                let cols = ts[0].shape()[1];
                if ts.iter().any(|t| t.shape()[1] != cols) {
                    return Err(shape_err(i, op, shapes()));
                }
                let rows = ts.iter().map(|t| t.shape()[0]).sum();
                let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
                owned(Tensor::new(vec![rows, cols], data)?)
            } else {
                let rows = ts[0].shape()[0];
                if ts.iter().any(|t| t.shape()[0] != rows) {
                    return Err(shape_err(i, op, shapes()));
                }
                let cols: usize = ts.iter().map(|t| t.shape()[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in &ts {
                        data.extend_from_slice(t.row(r));
                    }
                }
                owned(Tensor::new(vec![rows, cols], data)?)
            }
        }
        Op::Slice { input, axis, start, len } => {
            let t = v(input);
            let bad = || shape_err(i, op, vec![t.shape().to_vec(), vec![*axis, *start, *len]]);
            let (rows, cols) = matrix_dims(t).ok_or_else(bad)?;
            if t.rank() != 2 || *len == 0 {
                return Err(bad());
            }
            match axis {
                0 if start + len <= rows => {
                    owned(Tensor::new(vec![*len, cols], t.data()[start * cols..(start + len) * cols].to_vec())?)
                }
                1 if start + len <= cols => {
                    let mut data = Vec::with_capacity(rows * len);
                    for r in 0..rows {
                        data.extend_from_slice(&t.row(r)[*start..start + len]);
                    }
                    owned(Tensor::new(vec![rows, *len], data)?)
                }
                _ => Err(bad()),
            }
        }
        Op::Mean(a) => {
            let t = v(a);
            let s: f64 = t.data().iter().map(|&x| x as f64).sum();
            owned(Tensor::scalar((s / t.numel() as f64) as f32))
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (tx, tg, tb) = (v(x), v(gamma), v(beta));
            let bad = || shape_err(i, op, vec![tx.shape().to_vec(), tg.shape().to_vec(), tb.shape().to_vec()]);
            let (rows, cols) = matrix_dims(tx).ok_or_else(bad)?;
            if tg.shape() != [cols] || tb.shape() != [cols] {
                return Err(bad());
            }
            let mut out = vec![0.0f32; rows * cols];
            let mut xhat = vec![0.0f64; rows * cols];
            let mut rstd = vec![0.0f64; rows];
            for r in 0..rows {
                let row = tx.row(r);
                let mean = row.iter().map(|&a| a as f64).sum::<f64>() / cols as f64;
                let var = row.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for c in 0..cols {
                    let h = (row[c] as f64 - mean) * rs;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = (h * tg.data()[c] as f64 + tb.data()[c] as f64) as f32;
                }
            }
            Ok((Cow::Owned(Tensor::new(tx.shape().to_vec(), out)?), Aux::LayerNorm { xhat, rstd }))
        }
        Op::Gelu(a) => {
            let t = v(a);
            owned(Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| gelu(x as f64) as f32).collect())?)
        }
        Op::Gather { table, ids } => {
            let t = v(table);
            if t.rank() != 2 || ids.is_empty() || ids.iter().any(|&id| id >= t.shape()[0]) {
                let mut shapes = vec![t.shape().to_vec()];
                shapes.push(ids.clone());
                return Err(shape_err(i, op, shapes));
            }
            let cols = t.shape()[1];
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                data.extend_from_slice(t.row(id));
            }
            owned(Tensor::new(vec![ids.len(), cols], data)?)
        }
        Op::Softmax { x, prefix } => {
            let t = v(x);
            let (rows, cols) = matrix_dims(t).ok_or_else(|| shape_err(i, op, vec![t.shape().to_vec()]))?;
            let mut probs = vec![0.0f64; rows * cols];
            for r in 0..rows {
                let visible = visible_cols(r, cols, *prefix);
                softmax_row(&t.row(r)[..visible], &mut probs[r * cols..r * cols + visible]);
            }
            let out = probs.iter().map(|&p| p as f32).collect();
            Ok((Cow::Owned(Tensor::new(t.shape().to_vec(), out)?), Aux::Softmax { probs }))
        }
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let t = v(logits);
            let bad = || shape_err(i, op, vec![t.shape().to_vec(), vec![targets.len()]]);
            let (rows, cols) = matrix_dims(t).ok_or_else(bad)?;
            if targets.len() != rows || targets.iter().any(|&c| c >= cols) {
                return Err(bad());
            }
            let mut probs = vec![0.0f64; rows * cols];
            let mut total = 0.0f64;
            for r in 0..rows {
                let row = t.row(r);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a as f64));
                let sum: f64 = row.iter().map(|&a| (a as f64 - max).exp()).sum();
                let log_z = max + sum.ln();
                total += log_z - row[targets[r]] as f64;
                for c in 0..cols {
                    probs[r * cols + c] = (row[c] as f64 - log_z).exp();
                }
            }
            let loss = total / rows as f64;
            Ok((Cow::Owned(Tensor::scalar(loss as f32)), Aux::CrossEntropy { probs, loss }))
        }
    }
}

fn visible_cols(row: usize, cols: usize, prefix: usize) -> usize {
    prefix.max(row + 1).min(cols)
}

fn softmax_row(x: &[f32], out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a as f64));
    let mut sum = 0.0;
    for (o, &a) in out.iter_mut().zip(x) {
        *o = (a as f64 - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let av = a[i * k + p] as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
        for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = x as f32;
        }
    }
}

fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    if m == 1 {
        for j in 0..n {
            out[j] = dot_ff(a, &b[j * k..(j + 1) * k]) as f32;
        }
        return;
    }
    let mut bt = vec![0.0f32; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_nn(a, &bt, m, k, n, out);
}

/// Dot product with four fixed-order partial sums.
fn dot_ff(x: &[f32], y: &[f32]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            s[l] += x[4 * c + l] as f64 * y[4 * c + l] as f64;
        }
    }
    for j in chunks * 4..x.len() {
        s[0] += x[j] as f64 * y[j] as f64;
    }
    (s[0] + s[1]) + (s[2] + s[3])
}

fn dot_df(x: &[f64], y: &[f32]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            s[l] += x[4 * c + l] * y[4 * c + l] as f64;
        }
    }
    for j in chunks * 4..x.len() {
        s[0] += x[j] * y[j] as f64;
    }
    (s[0] + s[1]) + (s[2] + s[3])
}

fn axpy_f(alpha: f64, x: &[f32], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v as f64;
    }
}

fn axpy_d(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Gradients produced by [`backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// One entry per trainable bound input, zero-filled when the input has no path to the loss.
    pub params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }
}

/// Propagates `d loss / d node` from `loss` back through the tape.
pub fn backward(tape: &mut Tape<'_>, loss: NodeId) -> Result<Gradients> {
    if tape.consumed {
        return Err(Error::TapeConsumed);
    }
    let loss_value = tape.value(loss)?;
    if loss_value.numel() != 1 {
        return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
    }
    tape.consumed = true;

    let graph = tape.graph;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
    if tape.needs_grad[loss.0] {
        grads[loss.0] = Some(vec![1.0]);
    }

    for i in (0..=loss.0).rev() {
        let Some(g) = grads[i].take() else { continue };
        if tape.tapped[i] {
            let t = Tensor::new(tape.values[i].shape().to_vec(), g.iter().map(|&x| x as f32).collect())?;
            tape.tap_grads.insert(NodeId(i), t);
        }
        let op = &graph.nodes[i];
        if let Op::Input(_) | Op::Const(_) = op {
            grads[i] = Some(g);
            continue;
        }
        propagate(i, op, &g, tape, &mut grads);
    }

    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut accum: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (i, op) in graph.nodes.iter().enumerate() {
        if let Op::Input(name) = op {
            let value = tape.values[i].as_ref();
            if !value.trainable() {
                continue;
            }
            let slot = accum.entry(name.as_str()).or_insert_with(|| vec![0.0; value.numel()]);
            if let Some(Some(g)) = grads.get(i) {
                axpy_d(1.0, g, slot);
            }
        }
    }
    for (name, g) in accum {
        let shape = tape
            .graph
            .nodes
            .iter()
            .enumerate()
            .find_map(|(i, op)| matches!(op, Op::Input(n) if n == name).then(|| tape.values[i].shape().to_vec()))
            .expect("input present");
        params.insert(name.to_string(), Tensor::new(shape, g.into_iter().map(|x| x as f32).collect())?);
    }
    // Tapped nodes unreachable from the loss still report a zero gradient.
    for (i, &t) in tape.tapped.iter().enumerate() {
        if t && !tape.tap_grads.contains_key(&NodeId(i)) {
            tape.tap_grads.insert(NodeId(i), Tensor::zeros(tape.values[i].shape().to_vec()));
        }
    }
    Ok(Gradients { params })
}

fn accumulate(grads: &mut [Option<Vec<f64>>], needs: &[bool], id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
    if !needs[id.0] {
        return;
    }
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn propagate(i: usize, op: &Op, g: &[f64], tape: &Tape<'_>, grads: &mut [Option<Vec<f64>>]) {
    let val = |id: &NodeId| tape.values[id.0].as_ref();
    let needs = &tape.needs_grad;
    match op {
        Op::Input(_) | Op::Const(_) => {}
        Op::MatMul { a, b, transpose_b } => {
            let (ta, tb) = (val(a), val(b));
            let (m, k) = ta.as_matrix().expect("checked in forward");
            let n = if *transpose_b { tb.shape()[0] } else { tb.shape()[1] };
            let (ad, bd) = (ta.data(), tb.data());
            accumulate(grads, needs, *a, m * k, |da| {
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    let darow = &mut da[r * k..(r + 1) * k];
                    if *transpose_b {
                        // dA = dC · B, B is [n, k]
                        for (j, &gv) in grow.iter().enumerate() {
                            axpy_f(gv, &bd[j * k..(j + 1) * k], darow);
                        }
                    } else {
                        // dA = dC · Bᵀ, B is [k, n]
                        for (p, d) in darow.iter_mut().enumerate() {
                            *d += dot_df(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
            });
            accumulate(grads, needs, *b, k * n, |db| {
                for r in 0..m {
                    let arow = &ad[r * k..(r + 1) * k];
                    let grow = &g[r * n..(r + 1) * n];
                    if *transpose_b {
                        // dB = dCᵀ · A, B is [n, k]
                        for (j, &gv) in grow.iter().enumerate() {
                            axpy_f(gv, arow, &mut db[j * k..(j + 1) * k]);
                        }
                    } else {
                        // dB = Aᵀ · dC
                        for (p, &av) in arow.iter().enumerate() {
                            axpy_d(av as f64, grow, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            let (ta, tb) = (val(a), val(b));
            accumulate(grads, needs, *a, ta.numel(), |da| axpy_d(1.0, g, da));
            let broadcast = ta.shape() != tb.shape();
            accumulate(grads, needs, *b, tb.numel(), |db| {
                if broadcast {
                    let cols = tb.numel();
                    for row in g.chunks(cols) {
                        axpy_d(1.0, row, db);
                    }
                } else {
                    axpy_d(1.0, g, db);
                }
            });
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let cols = tb.numel();
            let broadcast = ta.shape() != tb.shape();
            let b_at = |j: usize| if broadcast { tb.data()[j % cols] } else { tb.data()[j] } as f64;
            accumulate(grads, needs, *a, ta.numel(), |da| {
                for (j, d) in da.iter_mut().enumerate() {
                    *d += g[j] * b_at(j);
                }
            });
            accumulate(grads, needs, *b, tb.numel(), |db| {
                for (j, &x) in ta.data().iter().enumerate() {
                    let slot = if broadcast { j % cols } else { j };
                    db[slot] += g[j] * x as f64;
                }
            });
        }
        Op::Scale(a, s) => {
            let len = val(a).numel();
            accumulate(grads, needs, *a, len, |da| axpy_d(*s as f64, g, da));
        }
        Op::Concat { inputs, axis } => {
            let out = tape.values[i].as_ref();
            let (rows, cols) = (out.shape()[0], out.shape()[1]);
            let mut offset = 0;
            for id in inputs {
                let t = val(id);
                let (r_in, c_in) = (t.shape()[0], t.shape()[1]);
                accumulate(grads, needs, *id, t.numel(), |d| {
                    if *axis == 0 {
                        axpy_d(1.0, &g[offset * cols..(offset + r_in) * cols], d);
                    } else {
                        for r in 0..rows {
                            axpy_d(1.0, &g[r * cols + offset..r * cols + offset + c_in], &mut d[r * c_in..(r + 1) * c_in]);
                        }
                    }
                });
                offset += if *axis == 0 { r_in } else { c_in };
            }
        }
        Op::Slice { input, axis, start, len } => {
            let t = val(input);
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            accumulate(grads, needs, *input, t.numel(), |d| {
                if *axis == 0 {
                    axpy_d(1.0, g, &mut d[start * cols..(start + len) * cols]);
                } else {
                    for r in 0..rows {
                        axpy_d(1.0, &g[r * len..(r + 1) * len], &mut d[r * cols + start..r * cols + start + len]);
                    }
                }
            });
        }
        Op::Mean(a) => {
            let len = val(a).numel();
            let share = g[0] / len as f64;
            accumulate(grads, needs, *a, len, |d| d.iter_mut().for_each(|x| *x += share));
        }
        Op::LayerNorm { x, gamma, beta } => {
            let Aux::LayerNorm { xhat, rstd } = &tape.aux[i] else { unreachable!() };
            let tg = val(gamma);
            let cols = tg.numel();
            let rows = g.len() / cols;
            accumulate(grads, needs, *beta, cols, |db| {
                for row in g.chunks(cols) {
                    axpy_d(1.0, row, db);
                }
            });
            accumulate(grads, needs, *gamma, cols, |dg| {
                for (row, xh) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for c in 0..cols {
                        dg[c] += row[c] * xh[c];
                    }
                }
            });
            accumulate(grads, needs, *x, rows * cols, |dx| {
                let mut dxhat = vec![0.0f64; cols];
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dxhat[c] = grow[c] * tg.data()[c] as f64;
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let t = val(a);
            accumulate(grads, needs, *a, t.numel(), |d| {
                for (j, &x) in t.data().iter().enumerate() {
                    d[j] += g[j] * gelu_derivative(x as f64);
                }
            });
        }
        Op::Gather { table, ids } => {
            let t = val(table);
            let cols = t.shape()[1];
            accumulate(grads, needs, *table, t.numel(), |d| {
                for (r, &id) in ids.iter().enumerate() {
                    axpy_d(1.0, &g[r * cols..(r + 1) * cols], &mut d[id * cols..(id + 1) * cols]);
                }
            });
        }
        Op::Softmax { x, .. } => {
            let Aux::Softmax { probs } = &tape.aux[i] else { unreachable!() };
            let t = val(x);
            let cols = t.shape()[t.rank() - 1];
            accumulate(grads, needs, *x, t.numel(), |d| {
                for ((drow, grow), prow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(probs.chunks(cols)) {
                    let inner: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        drow[c] += prow[c] * (grow[c] - inner);
                    }
                }
            });
        }
        Op::SoftmaxCrossEntropy { logits, targets } => {
            let Aux::CrossEntropy { probs, .. } = &tape.aux[i] else { unreachable!() };
            let t = val(logits);
            let cols = t.shape()[t.rank() - 1];
            let rows = targets.len();
            let scale = g[0] / rows as f64;
            accumulate(grads, needs, *logits, t.numel(), |d| {
                for r in 0..rows {
                    for c in 0..cols {
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        d[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                    }
                }
            });
        }
    }
}

/// Central-difference gradient of `f` at `x`.
///
/// The divisor is the actual `f32` spacing `x⁺ − x⁻`, not `2·step`, so rounding of the
/// perturbed coordinate does not bias the quotient.
pub fn fd_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Validation(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for j in 0..x.numel() {
        let orig = x.data()[j];
        let hi = (orig as f64 + step) as f32;
        let lo = (orig as f64 - step) as f32;
        probe.data_mut()[j] = hi;
        let f_hi = f(&probe)?;
        probe.data_mut()[j] = lo;
        let f_lo = f(&probe)?;
        probe.data_mut()[j] = orig;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFiniteEvaluation);
        }
        out.push(((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Normwise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
