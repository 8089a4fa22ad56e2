use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Layer norm epsilon used by every block.
pub const LN_EPS: f64 = 1e-6;

/// Dense layer `y = x W^T + b` with `w: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T: Scalar = f64> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl<T: Scalar> LinearParams<T> {
    pub fn init(input: usize, output: usize, std: f64, rng: &mut impl Rng) -> Self {
        LinearParams {
            w: Tensor::randn(vec![output, input], std, rng),
            b: Tensor::zeros(vec![output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        LinearParams {
            w: Tensor::zeros(vec![output, input]),
            b: Tensor::zeros(vec![output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.dim(1)
    }

    pub fn output_dim(&self) -> usize {
        self.w.dim(0)
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> LinearVars {
        LinearVars {
            w: leaf(tape, &self.w, trainable),
            b: leaf(tape, &self.b, trainable),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = vars.apply(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub(crate) fn push_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

impl LinearVars {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.w, Some(self.b))
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.w, self.b]
    }
}

pub(crate) fn leaf<T: Scalar>(tape: &mut Tape<T>, t: &Tensor<T>, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Two-layer MLP `fc2(gelu(fc1(x)))` with hidden width `expand * d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T: Scalar = f64> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

impl<T: Scalar> FeedForward<T> {
    pub fn init(dim: usize, expand: usize, std: f64, rng: &mut impl Rng) -> Self {
        FeedForward {
            fc1: LinearParams::init(dim, expand * dim, std, rng),
            fc2: LinearParams::init(expand * dim, dim, std, rng),
        }
    }

    pub fn zeros(dim: usize, expand: usize) -> Self {
        FeedForward {
            fc1: LinearParams::zeros(dim, expand * dim),
            fc2: LinearParams::zeros(expand * dim, dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> FeedForwardVars {
        FeedForwardVars {
            fc1: self.fc1.bind(tape, trainable),
            fc2: self.fc2.bind(tape, trainable),
        }
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.fc1.push_named(&format!("{prefix}.fc1"), out);
        self.fc2.push_named(&format!("{prefix}.fc2"), out);
    }

    pub(crate) fn push_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.fc1.push_named_mut(&format!("{prefix}.fc1"), out);
        self.fc2.push_named_mut(&format!("{prefix}.fc2"), out);
    }
}

impl FeedForwardVars {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.apply(tape, h)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.fc1.vars().to_vec();
        v.extend(self.fc2.vars());
        v
    }
}

/// `SiLU` followed by a linear layer whose output is cut into `parts`
/// equal pieces. The linear layer starts at zero so the block it drives
/// starts as the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionHead<T: Scalar = f64> {
    pub parts: usize,
    pub linear: LinearParams<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConditionHeadVars {
    pub parts: usize,
    pub linear: LinearVars,
}

impl<T: Scalar> ConditionHead<T> {
    pub fn zeros(dim: usize, parts: usize) -> Self {
        ConditionHead {
            parts,
            linear: LinearParams::zeros(dim, parts * dim),
        }
    }

    pub fn init(dim: usize, parts: usize, std: f64, rng: &mut impl Rng) -> Self {
        ConditionHead {
            parts,
            linear: LinearParams::init(dim, parts * dim, std, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ConditionHeadVars {
        ConditionHeadVars {
            parts: self.parts,
            linear: self.linear.bind(tape, trainable),
        }
    }
}

impl ConditionHeadVars {
    /// `cond: [batch, d]` to `parts` tensors of shape `[batch, d]`.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, cond: Var) -> Result<Vec<Var>> {
        let a = tape.silu(cond)?;
        let y = self.linear.apply(tape, a)?;
        let axis = tape.shape(y).len() - 1;
        tape.chunk(y, self.parts, axis)
    }
}

/// Broadcast a per-sample `[batch, d]` (or `[batch, 1, d]`) vector over
/// the `n` tokens of `like: [batch, n, d]`.
pub fn broadcast_tokens<T: Scalar>(tape: &mut Tape<T>, v: Var, like: Var) -> Result<Var> {
    let target = tape.shape(like).to_vec();
    let shape = tape.shape(v).to_vec();
    if target.len() != 3 {
        return Err(Error::invalid("broadcast", format!("expected [batch, n, d] tokens, got {target:?}")));
    }
    let (b, n, d) = (target[0], target[1], target[2]);
    let v = match shape.as_slice() {
        [vb, vd] if *vb == b && *vd == d => tape.reshape(v, vec![b, 1, d])?,
        [vb, 1, vd] if *vb == b && *vd == d => v,
        s if s == target.as_slice() => return Ok(v),
        _ => return Err(Error::shape("broadcast", &shape, &target)),
    };
    if n == 1 {
        Ok(v)
    } else {
        tape.expand(v, 1, n)
    }
}

/// `x * (1 + scale) + shift` with per-sample `scale` and `shift`.
pub fn modulation_on<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let scale = broadcast_tokens(tape, scale, x)?;
    let shift = broadcast_tokens(tape, shift, x)?;
    tape.scale_shift(x, scale, shift)
}

/// `x + (1 + gate) * f_out` with a per-sample `gate`.
pub fn gated_residual_on<T: Scalar>(tape: &mut Tape<T>, x: Var, f_out: Var, gate: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(f_out) {
        return Err(Error::shape("gated_residual", tape.shape(x), tape.shape(f_out)));
    }
    let gate = broadcast_tokens(tape, gate, f_out)?;
    tape.scale_shift(f_out, gate, x)
}

/// Eager [`modulation_on`].
pub fn modulation<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, s, b) = (tape.constant(x.clone()), tape.constant(scale.clone()), tape.constant(shift.clone()));
    let y = modulation_on(&mut tape, x, s, b)?;
    Ok(tape.value(y).clone())
}

/// Eager [`gated_residual_on`].
pub fn gated_residual<T: Scalar>(x: &Tensor<T>, f_out: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, f, g) = (tape.constant(x.clone()), tape.constant(f_out.clone()), tape.constant(gate.clone()));
    let y = gated_residual_on(&mut tape, x, f, g)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulation_identity_and_hand_case() {
        let x = Tensor::<f64>::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::zeros(vec![1, 2]);
        assert_eq!(modulation(&x, &z, &z).unwrap(), x);
        let ones = Tensor::full(vec![1, 2, 2], 1.0);
        let s = Tensor::full(vec![1, 2], 1.0);
        let b = Tensor::full(vec![1, 2], -1.0);
        assert!(modulation(&ones, &s, &b).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn gate_of_minus_one_keeps_residual() {
        let x = Tensor::<f64>::new(vec![1, 2, 1], vec![3.0, -1.0]).unwrap();
        let f = Tensor::new(vec![1, 2, 1], vec![10.0, 20.0]).unwrap();
        let g = Tensor::full(vec![1, 1], -1.0);
        assert_eq!(gated_residual(&x, &f, &g).unwrap(), x);
    }

    #[test]
    fn broadcast_rejects_wrong_batch() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 4]);
        let s = Tensor::zeros(vec![3, 4]);
        assert!(modulation(&x, &s, &s).is_err());
    }

    #[test]
    fn condition_head_splits_evenly() {
        let head = ConditionHead::<f64>::zeros(3, 4);
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape, false);
        let c = tape.constant(Tensor::full(vec![2, 3], 0.5));
        let parts = vars.apply(&mut tape, c).unwrap();
        assert_eq!(parts.len(), 4);
        for p in parts {
            assert_eq!(tape.shape(p), &[2, 3]);
            assert!(tape.value(p).data().iter().all(|v| *v == 0.0));
        }
    }
}
