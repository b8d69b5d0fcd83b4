//! Tape of tensor operations with reverse-mode gradient propagation.
//!
//! Every operation appends one node whose parents already live on the tape,
//! so insertion order is a valid topological order and the backward pass is a
//! single reverse sweep. Gradients accumulate additively across fan-out.

use rand::Rng;

use super::gemm::{gemm, View};
use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator tag recorded for every tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Transpose,
    Reshape,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Embedding,
    Concat,
    Slice,
    MaskedMean,
    Sigmoid,
    Log,
    Exp,
    Gelu,
    Sum,
    Mean,
    Pick,
    Bce,
    Attention,
    Dropout,
}

/// Settings of the fused scaled-dot-product attention operator.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub batch: usize,
    /// `key_mask[b * seq_k + j]` is false for keys that must be ignored.
    pub key_mask: Vec<bool>,
    pub causal: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MaskedMean {
        x: Var,
        weights: Vec<f64>,
        groups: usize,
    },
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Bce {
        x: Var,
        targets: Vec<f64>,
        clamp: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
        seq_q: usize,
        seq_k: usize,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::MaskedMean { .. } => OpKind::MaskedMean,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Log(..) => OpKind::Log,
            Op::Exp(..) => OpKind::Exp,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Pick { .. } => OpKind::Pick,
            Op::Bce { .. } => OpKind::Bce,
            Op::Attention { .. } => OpKind::Attention,
            Op::Dropout { .. } => OpKind::Dropout,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, .. }
            | Op::Slice { x, .. }
            | Op::MaskedMean { x, .. }
            | Op::Pick { x, .. }
            | Op::Bce { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Owned view of one recorded node, for inspection and tests.
#[derive(Clone, Debug)]
pub struct TapeNode {
    pub op_kind: OpKind,
    pub parent_ids: Vec<Var>,
    pub requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it was not reached.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

/// A single-writer tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

type Res = Result<Var, TensorError>;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `rhs` broadcasts against `lhs` when it equals a trailing suffix of it.
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn node(&self, var: Var) -> TapeNode {
        let n = &self.nodes[var.0];
        TapeNode {
            op_kind: n.op.kind(),
            parent_ids: n.op.parents(),
            requires_grad: n.requires_grad,
        }
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, node_op: Op) -> Res {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = node_op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Dispatches the operators that need no extra arguments.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Res {
        let arity = |n: usize| -> Result<(), TensorError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::Invalid {
                    op: "forward_op",
                    reason: format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match kind {
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            OpKind::LogSoftmax => arity(1).and_then(|_| self.log_softmax(inputs[0])),
            OpKind::LayerNorm => arity(1).and_then(|_| self.layer_norm(inputs[0], 1e-9)),
            OpKind::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::Gelu => arity(1).and_then(|_| self.gelu(inputs[0])),
            OpKind::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::Concat => self.concat(inputs, 0),
            other => Err(TensorError::Invalid {
                op: "forward_op",
                reason: format!("{other:?} needs operator-specific arguments"),
            }),
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Res {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !broadcast_ok(sa, sb) {
            return Err(mismatch(op, sa, sb));
        }
        let shape = sa.to_vec();
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let m = vb.len();
        let data = va
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % m]))
            .collect();
        self.push(op, shape, data, make(a, b))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Res {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        self.push("scale", t.shape().to_vec(), data, Op::Scale(a, c))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            View::row_major(0, k),
            self.value(b).data(),
            View::row_major(0, n),
            0.0,
            &mut out,
            View::row_major(0, n),
        );
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Res {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(mismatch("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Res {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(mismatch("reshape", t.shape(), shape));
        }
        let data = t.data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Res {
        let t = self.value(a);
        let n = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = t.shape().to_vec();
        self.push("softmax", shape, out, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Res {
        let t = self.value(a);
        let n = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax(a))
    }

    /// Normalizes each last-axis row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Res {
        let t = self.value(a);
        let n = last_dim(t.shape());
        let rows = t.numel() / n;
        let mut xhat = t.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        for row in xhat.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let shape = t.shape().to_vec();
        let out = xhat.clone();
        self.push("layer_norm", shape, out, Op::LayerNorm { x: a, xhat, rstd })
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Res {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(mismatch("embedding", t.shape(), &[]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        if ids.is_empty() {
            return Err(mismatch("embedding", t.shape(), &[0]));
        }
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Res {
        let first = self
            .nodes
            .get(inputs.first().map(|v| v.0).unwrap_or(usize::MAX))
            .ok_or(TensorError::Invalid {
                op: "concat",
                reason: "no inputs".into(),
            })?
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Takes `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Res {
        let t = self.value(a);
        let s = t.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                reason: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.push("slice", shape, out, Op::Slice { x: a, axis, start })
    }

    /// Mean of the rows of a `[groups * len, d]` tensor per group, counting
    /// only rows whose mask entry is non-zero. Produces `[groups, d]`.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool], groups: usize) -> Res {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != mask.len() || groups == 0 || !mask.len().is_multiple_of(groups)
        {
            return Err(mismatch("masked_mean", t.shape(), &[mask.len()]));
        }
        let d = t.shape()[1];
        let len = mask.len() / groups;
        let mut weights = vec![0.0; mask.len()];
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let count = mask[g * len..(g + 1) * len].iter().filter(|&&m| m).count();
            if count == 0 {
                continue;
            }
            let w = 1.0 / count as f64;
            for r in g * len..(g + 1) * len {
                if mask[r] {
                    weights[r] = w;
                    for (o, x) in out[g * d..(g + 1) * d].iter_mut().zip(t.row(r)) {
                        *o += w * x;
                    }
                }
            }
        }
        self.push(
            "masked_mean",
            vec![groups, d],
            out,
            Op::MaskedMean {
                x: a,
                weights,
                groups,
            },
        )
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, make: Op) -> Res {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(op, shape, data, make)
    }

    pub fn sigmoid(&mut self, a: Var) -> Res {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// Natural log; non-positive inputs are rejected as non-finite.
    pub fn log(&mut self, a: Var) -> Res {
        self.unary(
            "log",
            a,
            |x| if x > 0.0 { x.ln() } else { f64::NAN },
            Op::Log(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Res {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Res {
        self.unary("gelu", a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Res {
        let s = self.value(a).data().iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Res {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", vec![], vec![s], Op::Mean(a))
    }

    /// Selects `x[i, idx[i]]` from a `[n, v]` tensor, producing `[n]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Res {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(mismatch("pick", t.shape(), &[idx.len()]));
        }
        let v = t.shape()[1];
        let mut out = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: i,
                    bound: v,
                });
            }
            out.push(t.data()[r * v + i]);
        }
        self.push(
            "pick",
            vec![idx.len()],
            out,
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    /// Elementwise binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` for
    /// probabilities `p`, clamped to `[clamp, 1 - clamp]`.
    pub fn bce(&mut self, a: Var, targets: &[f64], clamp: f64) -> Res {
        let t = self.value(a);
        if t.numel() != targets.len() {
            return Err(mismatch("bce", t.shape(), &[targets.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .collect();
        let shape = t.shape().to_vec();
        self.push(
            "bce",
            shape,
            data,
            Op::Bce {
                x: a,
                targets: targets.to_vec(),
                clamp,
            },
        )
    }

    /// Inverted dropout with keep probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Res {
        if p <= 0.0 {
            return Ok(a);
        }
        let t = self.value(a);
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = t.shape().to_vec();
        self.push("dropout", shape, data, Op::Dropout { x: a, scale })
    }

    /// Multi-head scaled-dot-product attention over a batch of fixed-length
    /// sequences. `q` is `[batch * seq_q, d]`, `k` and `v` are
    /// `[batch * seq_k, d]`; heads split the last axis evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Res {
        let (sq, sk, sv) = (
            self.value(q).shape().to_vec(),
            self.value(k).shape().to_vec(),
            self.value(v).shape().to_vec(),
        );
        let b = spec.batch;
        let h = spec.heads;
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(mismatch("attention", &sq, &sk));
        }
        let d = sq[1];
        if b == 0 || h == 0 || d % h != 0 || sq[0] % b != 0 || sk[0] % b != 0 {
            return Err(mismatch("attention", &sq, &[b, h]));
        }
        let (lq, lk) = (sq[0] / b, sk[0] / b);
        if spec.key_mask.len() != b * lk || (spec.causal && lq != lk) {
            return Err(mismatch("attention", &sk, &[spec.key_mask.len()]));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; b * h * lq * lk];
        let mut out = vec![0.0; b * lq * d];
        for bi in 0..b {
            for hi in 0..h {
                let p = &mut probs[(bi * h + hi) * lq * lk..(bi * h + hi + 1) * lq * lk];
                gemm(
                    lq,
                    dh,
                    lk,
                    qd,
                    View::row_major(bi * lq * d + hi * dh, d),
                    kd,
                    View::transposed(bi * lk * d + hi * dh, d),
                    0.0,
                    p,
                    View::row_major(0, lk),
                );
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let allowed =
                        |j: usize| spec.key_mask[bi * lk + j] && (!spec.causal || j <= i);
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        *s *= scale;
                        if allowed(j) {
                            max = max.max(*s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        row.iter_mut().for_each(|s| *s = 0.0);
                        continue;
                    }
                    let mut total = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if allowed(j) { (*s - max).exp() } else { 0.0 };
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                gemm(
                    lq,
                    lk,
                    dh,
                    p,
                    View::row_major(0, lk),
                    vd,
                    View::row_major(bi * lk * d + hi * dh, d),
                    0.0,
                    &mut out,
                    View::row_major(bi * lq * d + hi * dh, d),
                );
            }
        }
        self.push(
            "attention",
            vec![b * lq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                seq_q: lq,
                seq_k: lk,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`. Every differentiable node reachable
    /// from `loss` receives an accumulated gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            let len = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    acc(grads, *a, &|g| {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    });
                }
                if self.wants(*b) {
                    let m = self.value(*b).numel();
                    acc(grads, *b, &|g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % m] += sign * d;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let m = vb.len();
                if self.wants(*a) {
                    acc(grads, *a, &|g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i] += d * vb[i % m];
                        }
                    });
                }
                if self.wants(*b) {
                    acc(grads, *b, &|g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % m] += d * va[i];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                acc(grads, *a, &|g| {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
                });
            }
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    // dA = dY · Bᵀ
                    acc(grads, *a, &|g| {
                        gemm(
                            m,
                            n,
                            k,
                            dy,
                            View::row_major(0, n),
                            tb.data(),
                            View::transposed(0, n),
                            1.0,
                            g,
                            View::row_major(0, k),
                        )
                    });
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dY
                    acc(grads, *b, &|g| {
                        gemm(
                            k,
                            m,
                            n,
                            ta.data(),
                            View::transposed(0, k),
                            dy,
                            View::row_major(0, n),
                            1.0,
                            g,
                            View::row_major(0, n),
                        )
                    });
                }
            }
            Op::Transpose(a) => {
                let s = self.value(*a).shape();
                let (r, c) = (s[0], s[1]);
                acc(grads, *a, &|g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(grads, *a, &|g| {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                acc(grads, *a, &|g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                acc(grads, *a, &|g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                        let total: f64 = dr.iter().sum();
                        for j in 0..n {
                            gr[j] += dr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let n = last_dim(node.value.shape());
                acc(grads, *x, &|g| {
                    for (r, ((gr, xr), dr)) in g
                        .chunks_mut(n)
                        .zip(xhat.chunks(n))
                        .zip(dy.chunks(n))
                        .enumerate()
                    {
                        let mean_d = dr.iter().sum::<f64>() / n as f64;
                        let mean_dx = dr.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gr[j] += rstd[r] * (dr[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                acc(grads, *table, &|g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += dy[r * d + j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.value(v).shape()[*axis] * inner;
                    if self.wants(v) {
                        acc(grads, v, &|g| {
                            for o in 0..outer {
                                let src = &dy[o * total + offset..o * total + offset + chunk];
                                g[o * chunk..(o + 1) * chunk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(g, d)| *g += d);
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.value(*x).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                acc(grads, *x, &|g| {
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        g[base..base + len * inner]
                            .iter_mut()
                            .zip(&dy[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::MaskedMean { x, weights, groups } => {
                let d = node.value.shape()[1];
                let len = weights.len() / groups;
                acc(grads, *x, &|g| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let grp = r / len;
                        for j in 0..d {
                            g[r * d + j] += w * dy[grp * d + j];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / x[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i];
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_parts(x[i]).1;
                    }
                });
            }
            Op::Sum(a) => {
                acc(grads, *a, &|g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(grads, *a, &|g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::Pick { x, idx } => {
                let v = self.value(*x).shape()[1];
                acc(grads, *x, &|g| {
                    for (r, &i) in idx.iter().enumerate() {
                        g[r * v + i] += dy[r];
                    }
                });
            }
            Op::Bce { x, targets, clamp } => {
                let p = self.value(*x).data();
                acc(grads, *x, &|g| {
                    for i in 0..g.len() {
                        if p[i] < *clamp || p[i] > 1.0 - clamp {
                            continue;
                        }
                        let y = targets[i];
                        g[i] += dy[i] * (-(y / p[i]) + (1.0 - y) / (1.0 - p[i]));
                    }
                });
            }
            Op::Dropout { x, scale } => {
                acc(grads, *x, &|g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * scale[i];
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                seq_q: lq,
                seq_k: lk,
            } => self.attention_backward(*q, *k, *v, spec, probs, *lq, *lk, dy, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        lq: usize,
        lk: usize,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (b, h) = (spec.batch, spec.heads);
        let d = self.value(q).shape()[1];
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; lq * lk];
        for bi in 0..b {
            for hi in 0..h {
                let p = &probs[(bi * h + hi) * lq * lk..(bi * h + hi + 1) * lq * lk];
                let q_view = View::row_major(bi * lq * d + hi * dh, d);
                let k_view = View::row_major(bi * lk * d + hi * dh, d);
                let o_view = View::row_major(bi * lq * d + hi * dh, d);
                // dP = dO · Vᵀ
                gemm(
                    lq,
                    dh,
                    lk,
                    dy,
                    o_view,
                    vd,
                    View::transposed(bi * lk * d + hi * dh, d),
                    0.0,
                    &mut ds,
                    View::row_major(0, lk),
                );
                // dV += Pᵀ · dO
                gemm(
                    lk,
                    lq,
                    dh,
                    p,
                    View::transposed(0, lk),
                    dy,
                    o_view,
                    1.0,
                    &mut dv,
                    k_view,
                );
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut ds[i * lk..(i + 1) * lk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(p, d)| p * d).sum();
                    for j in 0..lk {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dQ += dS · K
                gemm(
                    lq,
                    lk,
                    dh,
                    &ds,
                    View::row_major(0, lk),
                    kd,
                    k_view,
                    1.0,
                    &mut dq,
                    q_view,
                );
                // dK += dSᵀ · Q
                gemm(
                    lk,
                    lq,
                    dh,
                    &ds,
                    View::transposed(0, lk),
                    qd,
                    q_view,
                    1.0,
                    &mut dk,
                    k_view,
                );
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if !self.wants(var) {
                continue;
            }
            match &mut grads[var.0] {
                Some(slot) => slot.iter_mut().zip(&g).for_each(|(s, x)| *s += x),
                slot @ None => *slot = Some(g),
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
