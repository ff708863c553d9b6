//! Reverse-mode tape over a closed set of operations.
//!
//! Every call to [`Tape::apply`] validates shapes, computes the forward value
//! and appends a node. [`Tape::backward`] walks the nodes in exact reverse
//! recording order, so inputs always precede outputs.

use std::collections::HashMap;
use std::sync::Arc;

use super::array::numel;
use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean mask over the last two axes of a softmax input. `true` keeps the logit.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Arc<Vec<bool>>,
}

/// The closed set of differentiable operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Op<T> {
    Leaf,
    /// `[.., m, k] · [.., k, n]`; a rank-2 right operand is shared across the batch.
    MatMul,
    /// Elementwise sum; the right operand may be a trailing-suffix broadcast.
    Add,
    /// Elementwise product with the same broadcast rule as `Add`.
    Mul,
    Scale(T),
    /// Swap two axes.
    Transpose(usize, usize),
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Row gather from a rank-2 table.
    Embedding { ids: Arc<Vec<usize>> },
    Softmax { axis: usize, mask: Option<SoftmaxMask> },
    /// Inputs: `x, gain, bias`; normalizes the last axis.
    LayerNorm { eps: T },
    Gelu,
    Tanh,
    Exp,
    /// Multiplies by an externally supplied mask of identical shape.
    DropoutMask { mask: Arc<Vec<T>> },
    /// Per-row label-smoothed cross-entropy of `[n, v]` logits; output shape `[n]`.
    CrossEntropy { targets: Arc<Vec<usize>>, smoothing: T },
    /// Normalizes the last axis to unit l2 norm.
    L2Normalize,
    Sum,
    Mean,
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::DropoutMask { .. } => "dropout-mask",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::L2Normalize => "l2-normalize",
            Op::Sum => "sum",
            Op::Mean => "mean",
        }
    }
}

#[derive(Debug)]
enum Saved<T> {
    None,
    /// Normalized input and reciprocal std per row.
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
    /// Softmax probabilities per row.
    Probs(Vec<T>),
    /// Row norms.
    Norms(Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    saved: Saved<T>,
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.map.get(&var)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.map.contains_key(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(Op::Leaf, Vec::new(), value, requires_grad, Saved::None))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(
        &mut self,
        op: Op<T>,
        inputs: Vec<Var>,
        value: Tensor<T>,
        requires_grad: bool,
        saved: Saved<T>,
    ) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` applied to `inputs` and returns the output node.
    pub fn apply(&mut self, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        let arity = match &op {
            Op::Leaf => return Err(Error::invalid(name, "leaves are created with Tape::leaf")),
            Op::MatMul | Op::Add | Op::Mul => Some(2),
            Op::LayerNorm { .. } => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::invalid(name, format!("expected {n} inputs, got {}", inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(Error::invalid(name, "expected at least one input"));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::invalid(name, format!("unknown node {}", bad.0)));
        }
        let (value, saved) = self.forward(&op, inputs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad, saved))
    }

    fn forward(&self, op: &Op<T>, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>)> {
        let x = &self.nodes[inputs[0].0].value;
        let name = op.name();
        let out = match op {
            Op::Leaf => unreachable!(),
            Op::MatMul => {
                let b = &self.nodes[inputs[1].0].value;
                let (batch, m, k, n, out_shape) = matmul_dims(x.shape(), b.shape())?;
                let mut out = vec![T::zero(); batch * m * n];
                let b_stride = if b.rank() == 2 { 0 } else { k * n };
                for bi in 0..batch {
                    kernels::matmul_acc(
                        &x.data()[bi * m * k..(bi + 1) * m * k],
                        &b.data()[bi * b_stride..bi * b_stride + k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::from_parts(out_shape, out)
            }
            Op::Add | Op::Mul => {
                let b = &self.nodes[inputs[1].0].value;
                if !broadcast_ok(x.shape(), b.shape()) {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let bl = b.len();
                let add = matches!(op, Op::Add);
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| {
                        let bv = b.data()[i % bl];
                        if add {
                            a + bv
                        } else {
                            a * bv
                        }
                    })
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::Scale(s) => {
                Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v * *s).collect())
            }
            Op::Transpose(i, j) => {
                let (i, j) = (*i.min(j), *i.max(j));
                if j >= x.rank() || i == j {
                    return Err(Error::invalid(
                        name,
                        format!("cannot swap axes ({i},{j}) of shape {:?}", x.shape()),
                    ));
                }
                let mut shape = x.shape().to_vec();
                shape.swap(i, j);
                Tensor::from_parts(shape, kernels::swap_axes(x.data(), x.shape(), i, j))
            }
            Op::Reshape(shape) => {
                if shape.iter().any(|&d| d == 0) || numel(shape) != x.len() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                x.reshaped(shape.clone())?
            }
            Op::Concat { axis } => {
                let axis = *axis;
                if axis >= x.rank() {
                    return Err(Error::invalid(name, format!("axis {axis} out of range for {:?}", x.shape())));
                }
                let mut total = 0;
                for v in inputs {
                    let s = self.nodes[v.0].value.shape();
                    let compatible = s.len() == x.rank()
                        && s.iter()
                            .zip(x.shape())
                            .enumerate()
                            .all(|(d, (a, b))| d == axis || a == b);
                    if !compatible {
                        return Err(Error::Shape {
                            op: name,
                            lhs: x.shape().to_vec(),
                            rhs: s.to_vec(),
                        });
                    }
                    total += s[axis];
                }
                let outer: usize = x.shape()[..axis].iter().product();
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for v in inputs {
                        let t = &self.nodes[v.0].value;
                        let chunk = t.shape()[axis] * inner;
                        out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = total;
                Tensor::from_parts(shape, out)
            }
            Op::Slice { axis, start, end } => {
                let (axis, start, end) = (*axis, *start, *end);
                if axis >= x.rank() || start >= end || end > x.shape()[axis] {
                    return Err(Error::invalid(
                        name,
                        format!("range {start}..{end} on axis {axis} invalid for {:?}", x.shape()),
                    ));
                }
                let outer: usize = x.shape()[..axis].iter().product();
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let dim = x.shape()[axis];
                let mut out = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * dim * inner;
                    out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = end - start;
                Tensor::from_parts(shape, out)
            }
            Op::Embedding { ids } => {
                if x.rank() != 2 {
                    return Err(Error::invalid(name, format!("table must be rank 2, got {:?}", x.shape())));
                }
                if ids.is_empty() {
                    return Err(Error::invalid(name, "empty id list"));
                }
                let (rows, dim) = (x.shape()[0], x.shape()[1]);
                let mut out = Vec::with_capacity(ids.len() * dim);
                for &id in ids.iter() {
                    if id >= rows {
                        return Err(Error::invalid(name, format!("id {id} out of range for {rows} rows")));
                    }
                    out.extend_from_slice(x.row(id));
                }
                Tensor::from_parts(vec![ids.len(), dim], out)
            }
            Op::Softmax { axis, mask } => return softmax_forward(x, *axis, mask.as_ref()),
            Op::LayerNorm { eps } => {
                let g = &self.nodes[inputs[1].0].value;
                let b = &self.nodes[inputs[2].0].value;
                let d = *x.shape().last().unwrap_or(&1);
                if x.rank() == 0 || g.shape() != [d] || b.shape() != [d] {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                let rows = x.len() / d;
                let inv_d = T::one() / T::lit(d as f64);
                let mut xhat = Vec::with_capacity(x.len());
                let mut rstd = Vec::with_capacity(rows);
                let mut out = Vec::with_capacity(x.len());
                for r in 0..rows {
                    let row = &x.data()[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                    let rs = T::one() / (var + *eps).sqrt();
                    rstd.push(rs);
                    for (c, &v) in row.iter().enumerate() {
                        let h = (v - mean) * rs;
                        xhat.push(h);
                        out.push(h * g.data()[c] + b.data()[c]);
                    }
                }
                return Ok((
                    Tensor::from_parts(x.shape().to_vec(), out),
                    Saved::LayerNorm { xhat, rstd },
                ));
            }
            Op::Gelu => Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| kernels::gelu(v)).collect()),
            Op::Tanh => Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.tanh()).collect()),
            Op::Exp => Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect()),
            Op::DropoutMask { mask } => {
                if mask.len() != x.len() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: vec![mask.len()],
                    });
                }
                Tensor::from_parts(
                    x.shape().to_vec(),
                    x.data().iter().zip(mask.iter()).map(|(&a, &m)| a * m).collect(),
                )
            }
            Op::CrossEntropy { targets, smoothing } => {
                if x.rank() != 2 || targets.len() != x.shape()[0] {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: vec![targets.len()],
                    });
                }
                if !(*smoothing >= T::zero() && *smoothing < T::one()) {
                    return Err(Error::invalid(name, format!("label smoothing {smoothing} outside [0,1)")));
                }
                let (n, v) = (x.shape()[0], x.shape()[1]);
                let mut probs = Vec::with_capacity(n * v);
                let mut out = Vec::with_capacity(n);
                let inv_v = T::one() / T::lit(v as f64);
                for (r, &t) in targets.iter().enumerate() {
                    if t >= v {
                        return Err(Error::invalid(name, format!("target {t} out of range for {v} classes")));
                    }
                    let row = x.row(r);
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&l| (l - max).exp()).sum();
                    let lse = max + z.ln();
                    let mean_logit = row.iter().copied().sum::<T>() * inv_v;
                    let eps = *smoothing;
                    out.push((T::one() - eps) * (lse - row[t]) + eps * (lse - mean_logit));
                    probs.extend(row.iter().map(|&l| (l - lse).exp()));
                }
                return Ok((Tensor::from_parts(vec![n], out), Saved::Probs(probs)));
            }
            Op::L2Normalize => {
                let d = *x.shape().last().ok_or_else(|| Error::invalid(name, "scalar input"))?;
                let rows = x.len() / d;
                let mut norms = Vec::with_capacity(rows);
                let mut out = Vec::with_capacity(x.len());
                for r in 0..rows {
                    let row = &x.data()[r * d..(r + 1) * d];
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm == T::zero() {
                        return Err(Error::invalid(name, "cannot normalize a zero vector"));
                    }
                    norms.push(norm);
                    out.extend(row.iter().map(|&v| v / norm));
                }
                return Ok((Tensor::from_parts(x.shape().to_vec(), out), Saved::Norms(norms)));
            }
            Op::Sum => Tensor::scalar(x.data().iter().copied().sum()),
            Op::Mean => Tensor::scalar(x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64)),
        };
        Ok((out, Saved::None))
    }

    /// Gradients of a scalar `loss` with respect to every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss).to_vec();
        if !shape.is_empty() && numel(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let seed = Tensor::full(&shape, T::one());
        self.backward_seeded(&[(loss, seed)])
    }

    /// Vector-Jacobian product: propagates `seeds` (gradient of some outer
    /// objective with respect to each root) back to the leaves.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (var, seed) in seeds {
            if seed.shape() != self.shape(*var) {
                return Err(Error::Shape {
                    op: "backward",
                    lhs: self.shape(*var).to_vec(),
                    rhs: seed.shape().to_vec(),
                });
            }
            if !seed.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![T::zero(); seed.len()]);
            for (g, &s) in slot.iter_mut().zip(seed.data()) {
                *g += s;
            }
            last = last.max(var.0);
        }
        self.consumed = true;
        for id in (0..=last).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backward_node(id, &g, &mut grads)?;
        }
        let mut map = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[id].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                map.insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { map })
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let inputs = &node.inputs;
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let wants = |i: usize| self.nodes[inputs[i].0].requires_grad;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            let v = inputs[i];
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (batch, m, k, n, _) = matmul_dims(a.shape(), b.shape())?;
                let b_stride = if b.rank() == 2 { 0 } else { k * n };
                if wants(0) {
                    acc(0, &mut |ga| {
                        for bi in 0..batch {
                            kernels::matmul_a_bt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &b.data()[bi * b_stride..bi * b_stride + k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
                if wants(1) {
                    acc(1, &mut |gb| {
                        for bi in 0..batch {
                            kernels::matmul_at_b_acc(
                                &a.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * b_stride..bi * b_stride + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::Add => {
                if wants(0) {
                    acc(0, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
                if wants(1) {
                    acc(1, &mut |gb| {
                        let bl = gb.len();
                        for (i, &y) in g.iter().enumerate() {
                            gb[i % bl] += y;
                        }
                    });
                }
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                let bl = b.len();
                if wants(0) {
                    acc(0, &mut |ga| {
                        for (i, x) in ga.iter_mut().enumerate() {
                            *x += g[i] * b.data()[i % bl];
                        }
                    });
                }
                if wants(1) {
                    acc(1, &mut |gb| {
                        for (i, &y) in g.iter().enumerate() {
                            gb[i % bl] += y * a.data()[i];
                        }
                    });
                }
            }
            Op::Scale(s) => acc(0, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s)),
            Op::Transpose(i, j) => {
                let (i, j) = (*i.min(j), *i.max(j));
                let back = kernels::swap_axes(g, node.value.shape(), i, j);
                acc(0, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y));
            }
            Op::Reshape(_) | Op::DropoutMask { .. } | Op::Exp | Op::Tanh | Op::Gelu => {
                let x = val(0);
                let y = &node.value;
                acc(0, &mut |ga| match &node.op {
                    Op::Reshape(_) => ga.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    Op::DropoutMask { mask } => {
                        for ((a, &b), &m) in ga.iter_mut().zip(g).zip(mask.iter()) {
                            *a += b * m;
                        }
                    }
                    Op::Exp => {
                        for ((a, &b), &e) in ga.iter_mut().zip(g).zip(y.data()) {
                            *a += b * e;
                        }
                    }
                    Op::Tanh => {
                        for ((a, &b), &t) in ga.iter_mut().zip(g).zip(y.data()) {
                            *a += b * (T::one() - t * t);
                        }
                    }
                    Op::Gelu => {
                        for ((a, &b), &xv) in ga.iter_mut().zip(g).zip(x.data()) {
                            *a += b * kernels::gelu_grad(xv);
                        }
                    }
                    _ => unreachable!(),
                });
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0;
                for i in 0..inputs.len() {
                    let width = val(i).shape()[axis];
                    if wants(i) {
                        acc(i, &mut |gi| {
                            let chunk = width * inner;
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                for (a, &b) in gi[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[src..src + chunk]) {
                                    *a += b;
                                }
                            }
                        });
                    }
                    offset += width;
                }
            }
            Op::Slice { axis, start, end } => {
                let x = val(0);
                let (axis, start, end) = (*axis, *start, *end);
                let outer: usize = x.shape()[..axis].iter().product();
                let inner: usize = x.shape()[axis + 1..].iter().product();
                let dim = x.shape()[axis];
                let chunk = (end - start) * inner;
                acc(0, &mut |ga| {
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        for (a, &b) in ga[dst..dst + chunk].iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Embedding { ids } => {
                let dim = val(0).shape()[1];
                acc(0, &mut |ga| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &b) in ga[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Softmax { axis, .. } => {
                let y = &node.value;
                let shape = y.shape();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                acc(0, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: T = (0..len).map(|k| g[idx(k)] * y.data()[idx(k)]).sum();
                            for k in 0..len {
                                ga[idx(k)] += y.data()[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { .. } => {
                let Saved::LayerNorm { xhat, rstd } = &node.saved else {
                    unreachable!()
                };
                let gain = val(1);
                let d = gain.len();
                let rows = rstd.len();
                let inv_d = T::one() / T::lit(d as f64);
                if wants(0) {
                    acc(0, &mut |gx| {
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut mean_dh = T::zero();
                            let mut mean_dh_h = T::zero();
                            for c in 0..d {
                                let dh = gr[c] * gain.data()[c];
                                mean_dh += dh;
                                mean_dh_h += dh * hr[c];
                            }
                            mean_dh *= inv_d;
                            mean_dh_h *= inv_d;
                            for c in 0..d {
                                let dh = gr[c] * gain.data()[c];
                                gx[r * d + c] += rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                            }
                        }
                    });
                }
                if wants(1) {
                    acc(1, &mut |gg| {
                        for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                            gg[i % d] += gv * h;
                        }
                    });
                }
                if wants(2) {
                    acc(2, &mut |gb| {
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % d] += gv;
                        }
                    });
                }
            }
            Op::CrossEntropy { targets, smoothing } => {
                let Saved::Probs(probs) = &node.saved else {
                    unreachable!()
                };
                let v = val(0).shape()[1];
                let uniform = *smoothing / T::lit(v as f64);
                let hit = T::one() - *smoothing;
                acc(0, &mut |gx| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let mut q = uniform;
                            if c == t {
                                q += hit;
                            }
                            gx[r * v + c] += g[r] * (probs[r * v + c] - q);
                        }
                    }
                });
            }
            Op::L2Normalize => {
                let Saved::Norms(norms) = &node.saved else {
                    unreachable!()
                };
                let y = &node.value;
                let d = *y.shape().last().unwrap_or(&1);
                acc(0, &mut |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            gx[r * d + c] += (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                });
            }
            Op::Sum => acc(0, &mut |ga| ga.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean => {
                let n = T::lit(val(0).len() as f64);
                acc(0, &mut |ga| ga.iter_mut().for_each(|a| *a += g[0] / n));
            }
        }
        Ok(())
    }
}

/// `(batch, m, k, n, output shape)` for a matmul of the given operand shapes.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let batch_a = &a[..a.len() - 2];
    if b.len() > 2 && b[..b.len() - 2] != *batch_a {
        return Err(err());
    }
    let batch: usize = batch_a.iter().product();
    let mut out = batch_a.to_vec();
    out.extend([m, n]);
    Ok((batch, m, k, n, out))
}

fn softmax_forward<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    mask: Option<&SoftmaxMask>,
) -> Result<(Tensor<T>, Saved<T>)> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    if let Some(m) = mask {
        let last2 = if shape.len() >= 2 {
            (shape[shape.len() - 2], shape[shape.len() - 1])
        } else {
            (1, shape[0])
        };
        if axis != shape.len() - 1 || (m.rows, m.cols) != last2 || m.allowed.len() != m.rows * m.cols {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape.to_vec(),
                rhs: vec![m.rows, m.cols],
            });
        }
    }
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let allowed = |k: usize| match mask {
                Some(m) => m.allowed[(o % m.rows) * m.cols + k],
                None => true,
            };
            let mut max = T::neg_infinity();
            for k in 0..len {
                if allowed(k) {
                    max = max.max(x.data()[idx(k)]);
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::invalid("softmax", "row with every position masked"));
            }
            let mut z = T::zero();
            for k in 0..len {
                if allowed(k) {
                    let e = (x.data()[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
            }
            for k in 0..len {
                out[idx(k)] /= z;
            }
        }
    }
    Ok((Tensor::from_parts(shape.to_vec(), out), Saved::None))
}
