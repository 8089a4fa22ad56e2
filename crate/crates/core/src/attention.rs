//! Reference multi-head softmax attention with the same calling convention
//! as the mixer. Used for benchmark comparison, never as an output oracle.
//!
//! Scores are materialised one `(batch, head)` pair at a time with
//! max-subtraction and no other stabilisation; the backward pass
//! recomputes the probabilities instead of storing `n x n` per head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pom::MaskSpec;
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MHAParams<T: Scalar = f64> {
    pub dim: usize,
    pub heads: usize,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct MHAVars {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl MHAVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

impl<T: Scalar> MHAParams<T> {
    pub fn init(dim: usize, heads: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dim {dim} is not divisible by {heads} heads")));
        }
        Ok(MHAParams {
            dim,
            heads,
            w_q: Tensor::randn(vec![dim, dim], std, rng),
            w_k: Tensor::randn(vec![dim, dim], std, rng),
            w_v: Tensor::randn(vec![dim, dim], std, rng),
            w_o: Tensor::randn(vec![dim, dim], std, rng),
        })
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> MHAVars {
        MHAVars {
            heads: self.heads,
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            w_o: tape.param(self.w_o.clone()),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> MHAVars {
        MHAVars {
            heads: self.heads,
            w_q: tape.constant(self.w_q.clone()),
            w_k: tape.constant(self.w_k.clone()),
            w_v: tape.constant(self.w_v.clone()),
            w_o: tape.constant(self.w_o.clone()),
        }
    }
}

pub fn mha_forward_on<T: Scalar>(
    tape: &mut Tape<T>,
    xq: Var,
    xc: Option<Var>,
    vars: &MHAVars,
    mask: &MaskSpec,
) -> Result<Var> {
    let xc = xc.unwrap_or(xq);
    let q = tape.linear(xq, vars.w_q, None)?;
    let k = tape.linear(xc, vars.w_k, None)?;
    let v = tape.linear(xc, vars.w_v, None)?;
    let a = tape.attention(q, k, v, vars.heads, mask.clone())?;
    tape.linear(a, vars.w_o, None)
}

/// Eager attention forward. `xc = None` attends `xq` to itself.
pub fn mha_forward<T: Scalar>(
    xq: &Tensor<T>,
    xc: Option<&Tensor<T>>,
    params: &MHAParams<T>,
    mask: &MaskSpec,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let q = tape.constant(xq.clone());
    let c = xc.map(|c| tape.constant(c.clone()));
    let out = mha_forward_on(&mut tape, q, c, &vars, mask)?;
    Ok(tape.value(out).clone())
}

pub(crate) struct AttentionOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub empty_rows: usize,
}

struct Layout {
    batch: usize,
    queries: usize,
    context: usize,
    dim: usize,
    head_dim: usize,
}

fn layout<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, mask: &MaskSpec) -> Result<Layout> {
    if q.rank() != 3 || k.rank() != 3 || k.shape() != v.shape() || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2) {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let dim = q.dim(2);
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::invalid("attention", format!("dim {dim} is not divisible by {heads} heads")));
    }
    mask.validate(q.dim(0), q.dim(1), k.dim(1))?;
    Ok(Layout {
        batch: q.dim(0),
        queries: q.dim(1),
        context: k.dim(1),
        dim,
        head_dim: dim / heads,
    })
}

// Eight independent accumulators so the reductions below vectorize.
fn lane_max<T: Scalar>(row: &[T]) -> T {
    let mut lanes = [T::neg_infinity(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for (l, v) in lanes.iter_mut().zip(c) {
            *l = if *v > *l { *v } else { *l };
        }
    }
    let tail = chunks.remainder().iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    lanes.iter().fold(tail, |a, &v| a.max(v))
}

fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| *x * *y).sum();
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

/// Query rows handled per tile, so the score block stays cache resident.
const ROW_TILE: usize = 64;

/// Fill `probs` (`rows x n`) with the masked softmax of `scale * Q_h K_h^T`
/// for query rows `i0..i0 + rows`. Returns the number of rows with no
/// visible key; those rows are zero.
#[allow(clippy::too_many_arguments)]
fn head_probabilities<T: Scalar>(
    l: &Layout,
    q: &Tensor<T>,
    k: &Tensor<T>,
    b: usize,
    h: usize,
    i0: usize,
    rows: usize,
    mask: &MaskSpec,
    probs: &mut [T],
) -> usize {
    let (m, n, d, dh) = (l.queries, l.context, l.dim, l.head_dim);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let probs = &mut probs[..rows * n];
    gemm(
        rows,
        dh,
        n,
        scale,
        MatRef::row_major(q.data(), d).at((b * m + i0) * d + h * dh),
        MatRef::transposed(k.data(), d).at(b * n * d + h * dh),
        T::zero(),
        MatMut::row_major(probs, n),
    );
    let mut empty = 0;
    for (r, row) in probs.chunks_exact_mut(n).enumerate() {
        if matches!(mask, MaskSpec::None) {
            let max = lane_max(row);
            let total = T::exp_shifted(row, max);
            let inv = T::one() / total;
            row.iter_mut().for_each(|s| *s *= inv);
            continue;
        }
        let i = i0 + r;
        let mut max = T::neg_infinity();
        for (j, s) in row.iter().enumerate() {
            if mask.visible(b, i, j) && *s > max {
                max = *s;
            }
        }
        if max == T::neg_infinity() {
            row.iter_mut().for_each(|s| *s = T::zero());
            empty += 1;
            continue;
        }
        let mut total = T::zero();
        for (j, s) in row.iter_mut().enumerate() {
            *s = if mask.visible(b, i, j) { (*s - max).exp() } else { T::zero() };
            total += *s;
        }
        row.iter_mut().for_each(|s| *s /= total);
    }
    empty
}

/// Softmax attention probabilities, `[batch, heads, m, n]`.
pub fn attention_probabilities<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    heads: usize,
    mask: &MaskSpec,
) -> Result<Tensor<T>> {
    let l = layout(q, k, k, heads, mask)?;
    let (m, n) = (l.queries, l.context);
    let mut out = vec![T::zero(); l.batch * heads * m * n];
    for b in 0..l.batch {
        for h in 0..heads {
            head_probabilities(&l, q, k, b, h, 0, m, mask, &mut out[(b * heads + h) * m * n..][..m * n]);
        }
    }
    Ok(Tensor::from_parts(vec![l.batch, heads, m, n], out))
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: &MaskSpec,
) -> Result<AttentionOutput<T>> {
    let l = layout(q, k, v, heads, mask)?;
    let (m, n, d, dh) = (l.queries, l.context, l.dim, l.head_dim);
    let mut out = vec![T::zero(); l.batch * m * d];
    let tile = ROW_TILE.min(m);
    let mut probs = vec![T::zero(); tile * n];
    let mut empty_rows = 0;
    for b in 0..l.batch {
        for h in 0..heads {
            for i0 in (0..m).step_by(tile) {
                let rows = tile.min(m - i0);
                let empty = head_probabilities(&l, q, k, b, h, i0, rows, mask, &mut probs);
                if h == 0 {
                    empty_rows += empty;
                }
                gemm(
                    rows,
                    n,
                    dh,
                    T::one(),
                    MatRef::row_major(&probs, n),
                    MatRef::row_major(v.data(), d).at(b * n * d + h * dh),
                    T::zero(),
                    MatMut::row_major(&mut out, d).at((b * m + i0) * d + h * dh),
                );
            }
        }
    }
    Ok(AttentionOutput {
        output: Tensor::from_parts(vec![l.batch, m, d], out),
        empty_rows,
    })
}

pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    g: &Tensor<T>,
    heads: usize,
    mask: &MaskSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let l = layout(q, k, v, heads, mask)?;
    let (m, n, d, dh) = (l.queries, l.context, l.dim, l.head_dim);
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let tile = ROW_TILE.min(m);
    let mut probs = vec![T::zero(); tile * n];
    let mut dprobs = vec![T::zero(); tile * n];
    for b in 0..l.batch {
        for h in 0..heads {
            for i0 in (0..m).step_by(tile) {
                let rows = tile.min(m - i0);
                head_probabilities(&l, q, k, b, h, i0, rows, mask, &mut probs);
                let probs = &probs[..rows * n];
                let dprobs = &mut dprobs[..rows * n];
                let row_off = (b * m + i0) * d + h * dh;
                let g_view = MatRef::row_major(g.data(), d).at(row_off);
                // dP = dO V^T
                gemm(
                    rows,
                    dh,
                    n,
                    T::one(),
                    g_view,
                    MatRef::transposed(v.data(), d).at(b * n * d + h * dh),
                    T::zero(),
                    MatMut::row_major(dprobs, n),
                );
                // dV += P^T dO
                gemm(
                    n,
                    rows,
                    dh,
                    T::one(),
                    MatRef::transposed(probs, n),
                    g_view,
                    T::one(),
                    MatMut::row_major(&mut dv, d).at(b * n * d + h * dh),
                );
                // dS = P * (dP - rowsum(dP * P))
                for (prow, dprow) in probs.chunks_exact(n).zip(dprobs.chunks_exact_mut(n)) {
                    let dot = lane_dot(prow, dprow);
                    for (p, dp) in prow.iter().zip(dprow.iter_mut()) {
                        *dp = *p * (*dp - dot);
                    }
                }
                // dQ = scale dS K, dK += scale dS^T Q
                gemm(
                    rows,
                    n,
                    dh,
                    scale,
                    MatRef::row_major(dprobs, n),
                    MatRef::row_major(k.data(), d).at(b * n * d + h * dh),
                    T::zero(),
                    MatMut::row_major(&mut dq, d).at(row_off),
                );
                gemm(
                    n,
                    rows,
                    dh,
                    scale,
                    MatRef::transposed(dprobs, n),
                    MatRef::row_major(q.data(), d).at(row_off),
                    T::one(),
                    MatMut::row_major(&mut dk, d).at(b * n * d + h * dh),
                );
            }
        }
    }
    Ok((
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dv),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_is_output_of_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MHAParams::<f64>::init(4, 2, 0.5, &mut rng).unwrap();
        let x = Tensor::randn(vec![1, 1, 4], 1.0, &mut rng);
        let out = mha_forward(&x, None, &p, &MaskSpec::None).unwrap();
        let flat = x.reshape(vec![1, 4]).unwrap();
        let v = flat.matmul(&p.w_v.transpose2().unwrap()).unwrap();
        let expected = v.matmul(&p.w_o.transpose2().unwrap()).unwrap();
        assert!(out.reshape(vec![1, 4]).unwrap().max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn uniform_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::<f64>::randn(vec![1, 3, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::full(vec![1, 5, 4], 0.7);
        let p = attention_probabilities(&q, &k, 2, &MaskSpec::None).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn indivisible_heads_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(MHAParams::<f64>::init(6, 4, 0.5, &mut rng).is_err());
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::<f64>::randn(vec![1, 2, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![1, 3, 4], 1.0, &mut rng);
        let mask = MaskSpec::padding(1, 3, &[0, 0, 0]).unwrap();
        let out = attention_forward(&q, &k, &k, 2, &mask).unwrap();
        assert!(out.output.data().iter().all(|v| *v == 0.0));
        assert_eq!(out.empty_rows, 2);
    }
}
