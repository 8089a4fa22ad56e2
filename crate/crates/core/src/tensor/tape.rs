//! Reverse-mode differentiation over tensor-level primitives.
//!
//! Every primitive records its inputs and the value it produced. The tape is
//! append-only, so recording order is a topological order and `backward`
//! walks it once from the loss back to the first node.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{gemm, split_at_axis, MatMut, MatRef, Scalar, Tensor, Unary};
use crate::attention;
use crate::error::{Error, Result};
use crate::pom::{mix, MaskSpec};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// A recorded primitive application.
#[derive(Clone, Debug)]
pub enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    /// `x W^T + b` over the last axis of `x`; `W` is `[out, in]`.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `x * (1 + scale) + shift`.
    ScaleShift {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Unary(Var, Unary),
    Expand {
        x: Var,
        axis: usize,
        count: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
        shape: Vec<usize>,
    },
    /// Running Hadamard product of `degree` equal chunks of the last axis.
    CumulativeHadamard {
        x: Var,
        degree: usize,
    },
    /// Masked token mixing of polynomial features.
    Mix {
        h: Var,
        mask: MaskSpec,
        normalize: bool,
    },
    /// Affine-free layer norm over the last axis.
    LayerNorm {
        x: Var,
        eps: f64,
    },
    /// Multi-head scaled dot-product attention on projected q, k, v.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: MaskSpec,
    },
    /// Row lookup into a `[rows, width]` table.
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: bool,
    empty_rows: usize,
}

/// Single-owner recording of primitive applications.
pub struct Tape<T: Scalar = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
pub struct Gradients<T: Scalar> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Result<&Tensor<T>> {
        if var.tape != self.tape || var.index >= self.grads.len() {
            return Err(Error::ForeignVar { index: var.index });
        }
        self.grads[var.index]
            .as_ref()
            .ok_or(Error::NotAParameter { index: var.index })
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-trainable leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: param,
            param,
            empty_rows: 0,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignVar { index: var.index });
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    /// Number of all-zero mask rows met by mixing primitives so far.
    pub fn empty_rows(&self) -> usize {
        self.nodes.iter().map(|n| n.empty_rows).sum()
    }

    fn inputs(op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ScaleShift { x, scale, shift } => vec![*x, *scale, *shift],
            Op::Scale(x, _)
            | Op::Unary(x, _)
            | Op::Expand { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Slice { x, .. }
            | Op::Reshape { x, .. }
            | Op::CumulativeHadamard { x, .. }
            | Op::LayerNorm { x, .. } => vec![*x],
            Op::Mix { h, .. } => vec![*h],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Gather { table, .. } => vec![*table],
        }
    }

    /// Record `op`, evaluating it from the values already on the tape.
    pub fn record(&mut self, op: Op<T>) -> Result<Var> {
        let inputs = Self::inputs(&op);
        for v in &inputs {
            self.check(*v)?;
        }
        let (value, empty_rows) = self.eval(&op)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: false,
            empty_rows,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Re-evaluate every recorded primitive; true iff all outputs are
    /// reproduced bit for bit.
    pub fn replay(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let (value, _) = self.eval(&node.op)?;
            let same = value.shape() == node.value.shape()
                && value
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits_eq(*b));
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn eval(&self, op: &Op<T>) -> Result<(Tensor<T>, usize)> {
        let val = |v: &Var| &self.nodes[v.index].value;
        let out = match op {
            Op::Leaf => return Err(Error::invalid("tape", "leaves are not evaluated")),
            Op::MatMul(a, b) => val(a).matmul(val(b))?,
            Op::Linear { x, w, b } => linear_forward(val(x), val(w), b.as_ref().map(val))?,
            Op::Add(a, b) => val(a).add(val(b))?,
            Op::Sub(a, b) => val(a).sub(val(b))?,
            Op::Mul(a, b) => val(a).mul(val(b))?,
            Op::Scale(x, c) => val(x).scale(*c),
            Op::ScaleShift { x, scale, shift } => val(x).scale_shift(val(scale), val(shift))?,
            Op::Unary(x, kind) => val(x).unary(*kind),
            Op::Expand { x, axis, count } => val(x).expand(*axis, *count)?,
            Op::SumAxis { x, axis } => val(x).sum_axis(*axis)?,
            Op::MeanAxis { x, axis } => val(x).mean_axis(*axis)?,
            Op::SumAll(x) => Tensor::scalar(val(x).sum()),
            Op::MeanAll(x) => {
                let t = val(x);
                Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap())
            }
            Op::Slice { x, axis, start, len } => val(x).slice_axis(*axis, *start, *len)?,
            Op::Concat { parts, axis } => {
                let refs: Vec<_> = parts.iter().map(val).collect();
                Tensor::concat(&refs, *axis)?
            }
            Op::Reshape { x, shape } => val(x).reshape(shape.clone())?,
            Op::CumulativeHadamard { x, degree } => cumulative_hadamard(val(x), *degree)?,
            Op::Mix { h, mask, normalize } => {
                let mixed = mix::mix_forward(val(h), mask, *normalize)?;
                return Ok((mixed.state, mixed.empty_rows));
            }
            Op::LayerNorm { x, eps } => layer_norm_forward(val(x), T::lit(*eps))?,
            Op::Attention { q, k, v, heads, mask } => {
                let out = attention::attention_forward(val(q), val(k), val(v), *heads, mask)?;
                return Ok((out.output, out.empty_rows));
            }
            Op::Gather { table, rows } => gather_rows(val(table), rows)?,
        };
        Ok((out, 0))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        let loss_value = &self.nodes[root].value;
        if loss_value.len() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for idx in (0..=root).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.param {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
            } else {
                grads[idx] = None;
            }
        }
        for g in grads.iter().flatten() {
            g.ensure_finite("backward")?;
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: &Var| &self.nodes[v.index].value;
        let wants = |v: &Var| self.nodes[v.index].requires_grad;
        let send = |v: &Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if self.nodes[v.index].requires_grad {
                accumulate(&mut grads[v.index], t);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                if wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        MatRef::row_major(g.data(), n),
                        MatRef::transposed(bv.data(), n),
                        T::zero(),
                        MatMut::row_major(&mut da, k),
                    );
                    send(a, Tensor::from_parts(vec![m, k], da), grads);
                }
                if wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(g.data(), n),
                        T::zero(),
                        MatMut::row_major(&mut db, n),
                    );
                    send(b, Tensor::from_parts(vec![k, n], db), grads);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (out_f, in_f) = (wv.dim(0), wv.dim(1));
                let rows = xv.len() / in_f;
                if wants(x) {
                    let mut dx = vec![T::zero(); rows * in_f];
                    gemm(
                        rows,
                        out_f,
                        in_f,
                        T::one(),
                        MatRef::row_major(g.data(), out_f),
                        MatRef::row_major(wv.data(), in_f),
                        T::zero(),
                        MatMut::row_major(&mut dx, in_f),
                    );
                    send(x, Tensor::from_parts(xv.shape().to_vec(), dx), grads);
                }
                if wants(w) {
                    let mut dw = vec![T::zero(); out_f * in_f];
                    gemm(
                        out_f,
                        rows,
                        in_f,
                        T::one(),
                        MatRef::transposed(g.data(), out_f),
                        MatRef::row_major(xv.data(), in_f),
                        T::zero(),
                        MatMut::row_major(&mut dw, in_f),
                    );
                    send(w, Tensor::from_parts(vec![out_f, in_f], dw), grads);
                }
                if let Some(b) = b {
                    if wants(b) {
                        let mut db = vec![T::zero(); out_f];
                        for row in g.data().chunks_exact(out_f) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += *v;
                            }
                        }
                        send(b, Tensor::from_parts(vec![out_f], db), grads);
                    }
                }
            }
            Op::Add(a, b) => {
                send(a, g.clone(), grads);
                send(b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(a, g.clone(), grads);
                send(b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    send(a, g.mul(val(b))?, grads);
                }
                if wants(b) {
                    send(b, g.mul(val(a))?, grads);
                }
            }
            Op::Scale(x, c) => send(x, g.scale(*c), grads),
            Op::ScaleShift { x, scale, shift } => {
                if wants(x) {
                    let one_plus = val(scale).map(|s| T::one() + s);
                    send(x, g.mul(&one_plus)?, grads);
                }
                if wants(scale) {
                    send(scale, g.mul(val(x))?, grads);
                }
                send(shift, g.clone(), grads);
            }
            Op::Unary(x, kind) => {
                let xv = val(x);
                fn chain<T: Scalar>(g: &[T], x: &[T], d: impl Fn(T) -> T) -> Vec<T> {
                    g.iter().zip(x).map(|(gi, xi)| *gi * d(*xi)).collect()
                }
                let (gd, xd) = (g.data(), xv.data());
                let data = match kind {
                    Unary::Identity => gd.to_vec(),
                    Unary::Sigmoid => chain(gd, xd, |v| Unary::Sigmoid.derivative(v)),
                    Unary::Gelu => chain(gd, xd, |v| Unary::Gelu.derivative(v)),
                    Unary::Silu => chain(gd, xd, |v| Unary::Silu.derivative(v)),
                    Unary::Square => chain(gd, xd, |v| v + v),
                };
                send(x, Tensor::from_parts(xv.shape().to_vec(), data), grads);
            }
            Op::Expand { x, axis, .. } => send(x, g.sum_axis(*axis)?, grads),
            Op::SumAxis { x, axis } => {
                let count = val(x).dim(*axis);
                send(x, g.expand(*axis, count)?, grads);
            }
            Op::MeanAxis { x, axis } => {
                let count = val(x).dim(*axis);
                let inv = T::one() / T::from_usize(count).unwrap();
                send(x, g.expand(*axis, count)?.scale(inv), grads);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                send(x, Tensor::full(val(x).shape().to_vec(), gv), grads);
            }
            Op::MeanAll(x) => {
                let xv = val(x);
                let gv = g.data()[0] / T::from_usize(xv.len()).unwrap();
                send(x, Tensor::full(xv.shape().to_vec(), gv), grads);
            }
            Op::Slice { x, axis, start, len } => {
                let shape = val(x).shape().to_vec();
                let (outer, ext, inner) = split_at_axis(&shape, *axis);
                let mut dx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    dx[(o * ext + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                send(x, Tensor::from_parts(shape, dx), grads);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = val(p).dim(*axis);
                    if wants(p) {
                        send(p, g.slice_axis(*axis, start, len)?, grads);
                    }
                    start += len;
                }
            }
            Op::Reshape { x, .. } => {
                send(x, g.reshape(val(x).shape().to_vec())?, grads);
            }
            Op::CumulativeHadamard { x, degree } => {
                let dx = cumulative_hadamard_backward(val(x), &node.value, g, *degree);
                send(x, dx, grads);
            }
            Op::Mix { h, mask, normalize } => {
                let dh = mix::mix_backward(val(h).shape(), g, mask, *normalize)?;
                send(h, dh, grads);
            }
            Op::LayerNorm { x, eps } => {
                let dx = layer_norm_backward(val(x), g, T::lit(*eps));
                send(x, dx, grads);
            }
            Op::Attention { q, k, v, heads, mask } => {
                let (dq, dk, dv) = attention::attention_backward(val(q), val(k), val(v), g, *heads, mask)?;
                send(q, dq, grads);
                send(k, dk, grads);
                send(v, dv, grads);
            }
            Op::Gather { table, rows } => {
                let tv = val(table);
                let width = tv.dim(1);
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &row) in rows.iter().enumerate() {
                    for (acc, v) in dt[row * width..][..width].iter_mut().zip(&g.data()[r * width..][..width]) {
                        *acc += *v;
                    }
                }
                send(table, Tensor::from_parts(tv.shape().to_vec(), dt), grads);
            }
        }
        Ok(())
    }

    // Recording helpers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.record(Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.record(Op::Scale(x, c))
    }

    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.record(Op::ScaleShift { x, scale, shift })
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        self.record(Op::Unary(x, kind))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn expand(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        self.record(Op::Expand { x, axis, count })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(Op::SumAxis { x, axis })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(Op::MeanAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MeanAll(x))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(Op::Slice { x, axis, start, len })
    }

    pub fn chunk(&mut self, x: Var, parts: usize, axis: usize) -> Result<Vec<Var>> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "chunk",
                axis,
                rank: shape.len(),
            });
        }
        let extent = shape[axis];
        if parts == 0 || !extent.is_multiple_of(parts) {
            return Err(Error::IndivisibleChunk { axis, extent, parts });
        }
        let len = extent / parts;
        (0..parts).map(|p| self.slice(x, axis, p * len, len)).collect()
    }

    pub fn concat(&mut self, parts: Vec<Var>, axis: usize) -> Result<Var> {
        self.record(Op::Concat { parts, axis })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.record(Op::Reshape { x, shape })
    }

    pub fn cumulative_hadamard(&mut self, x: Var, degree: usize) -> Result<Var> {
        self.record(Op::CumulativeHadamard { x, degree })
    }

    pub fn mix(&mut self, h: Var, mask: MaskSpec, normalize: bool) -> Result<Var> {
        self.record(Op::Mix { h, mask, normalize })
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNorm { x, eps })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: MaskSpec) -> Result<Var> {
        self.record(Op::Attention { q, k, v, heads, mask })
    }

    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        self.record(Op::Gather { table, rows })
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.unary(diff, Unary::Square)?;
        self.mean_all(sq)
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitsEq for T {
    fn to_bits_eq(self, other: T) -> bool {
        // Equal values, or both NaN; distinguishes +0 from -0.
        (self == other && self.is_sign_negative() == other.is_sign_negative())
            || (self.is_nan() && other.is_nan())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            debug_assert_eq!(acc.shape, g.shape);
            for (a, v) in acc.data.iter_mut().zip(&g.data) {
                *a += *v;
            }
        }
    }
}

pub(crate) fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.rank() == 0 || *x.shape().last().unwrap() != w.dim(1) {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let (out_f, in_f) = (w.dim(0), w.dim(1));
    if let Some(b) = b {
        if b.shape() != [out_f] {
            return Err(Error::shape("linear bias", b.shape(), &[out_f]));
        }
    }
    let rows = x.len() / in_f;
    let mut out = match b {
        Some(b) => {
            let mut v = Vec::with_capacity(rows * out_f);
            for _ in 0..rows {
                v.extend_from_slice(b.data());
            }
            v
        }
        None => vec![T::zero(); rows * out_f],
    };
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(
        rows,
        in_f,
        out_f,
        T::one(),
        MatRef::row_major(x.data(), in_f),
        MatRef::transposed(w.data(), in_f),
        beta,
        MatMut::row_major(&mut out, out_f),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Ok(Tensor::from_parts(shape, out))
}

/// Running Hadamard product over `degree` equal chunks of the last axis:
/// chunk `m` of the output is the product of input chunks `1..=m`.
///
/// Degrees 2 to 4 take unrolled paths that perform the same multiplications
/// in the same order as the general loop.
pub(crate) fn cumulative_hadamard<T: Scalar>(x: &Tensor<T>, degree: usize) -> Result<Tensor<T>> {
    let last = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("cumulative_hadamard", "scalar input"))?;
    if degree == 0 || last % degree != 0 {
        return Err(Error::IndivisibleChunk {
            axis: x.rank() - 1,
            extent: last,
            parts: degree,
        });
    }
    let width = last / degree;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(last) {
        match degree {
            1 => {}
            2 => {
                let (h1, h2) = row.split_at_mut(width);
                for (b, a) in h2.iter_mut().zip(h1.iter()) {
                    *b *= *a;
                }
            }
            3 => {
                for i in 0..width {
                    let h1 = row[i];
                    let h2 = row[width + i] * h1;
                    row[width + i] = h2;
                    row[2 * width + i] *= h2;
                }
            }
            4 => {
                for i in 0..width {
                    let h1 = row[i];
                    let h2 = row[width + i] * h1;
                    let h3 = row[2 * width + i] * h2;
                    row[width + i] = h2;
                    row[2 * width + i] = h3;
                    row[3 * width + i] *= h3;
                }
            }
            _ => {
                for m in 1..degree {
                    for i in 0..width {
                        row[m * width + i] *= row[(m - 1) * width + i];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn cumulative_hadamard_backward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>, degree: usize) -> Tensor<T> {
    let last = *x.shape().last().unwrap();
    let width = last / degree;
    let mut dx = vec![T::zero(); x.len()];
    for ((xr, yr), (gr, dr)) in x
        .data()
        .chunks_exact(last)
        .zip(y.data().chunks_exact(last))
        .zip(g.data().chunks_exact(last).zip(dx.chunks_exact_mut(last)))
    {
        for i in 0..width {
            // y_m = y_{m-1} * x_m, walked from the last chunk down.
            let mut carry = T::zero();
            for m in (0..degree).rev() {
                let total = gr[m * width + i] + carry;
                if m == 0 {
                    dr[i] = total;
                } else {
                    dr[m * width + i] = total * yr[(m - 1) * width + i];
                    carry = total * xr[m * width + i];
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), dx)
}

pub(crate) fn layer_norm_forward<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
    let n = T::from_usize(d).unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|v| (*v - mean) * rstd));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn layer_norm_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, eps: T) -> Tensor<T> {
    let d = *x.shape().last().unwrap();
    let n = T::from_usize(d).unwrap();
    let mut dx = Vec::with_capacity(x.len());
    for (row, grow) in x.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        let mut g_mean = T::zero();
        let mut gy_mean = T::zero();
        for (v, gv) in row.iter().zip(grow) {
            let y = (*v - mean) * rstd;
            g_mean += *gv;
            gy_mean += *gv * y;
        }
        g_mean /= n;
        gy_mean /= n;
        dx.extend(row.iter().zip(grow).map(|(v, gv)| {
            let y = (*v - mean) * rstd;
            rstd * (*gv - g_mean - y * gy_mean)
        }));
    }
    Tensor::from_parts(x.shape().to_vec(), dx)
}

fn gather_rows<T: Scalar>(table: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 || rows.is_empty() {
        return Err(Error::invalid("gather", "expects a [rows, width] table and at least one index"));
    }
    let width = table.dim(1);
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        if r >= table.dim(0) {
            return Err(Error::invalid("gather", format!("row {r} out of range {}", table.dim(0))));
        }
        out.extend_from_slice(&table.data()[r * width..][..width]);
    }
    Ok(Tensor::from_parts(vec![rows.len(), width], out))
}
