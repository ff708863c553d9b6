//! Shorthand constructors over [`Tape::apply`].

use std::sync::Arc;

use super::tape::{Op, SoftmaxMask, Tape, Var};
use super::Scalar;
use crate::error::Result;

impl<T: Scalar> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        self.apply(Op::Transpose(i, j), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape(shape), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    /// Gathers rows `ids` of a rank-2 tensor.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.apply(Op::Embedding { ids: Arc::new(ids) }, &[table])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis, mask: None }, &[a])
    }

    pub fn masked_softmax(&mut self, a: Var, mask: SoftmaxMask) -> Result<Var> {
        let axis = self.shape(a).len().saturating_sub(1);
        self.apply(Op::Softmax { axis, mask: Some(mask) }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { eps: T::lit(1e-5) }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, smoothing: T) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets: Arc::new(targets),
                smoothing,
            },
            &[logits],
        )
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::L2Normalize, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    /// `x · w + b` with `w` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }
}
