//! Dense row-major tensors and the reverse-mode tape built on top of them.

pub mod fault;
mod scalar;
mod tape;
mod unary;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub(crate) use scalar::{gemm, MatMut, MatRef};
pub use scalar::{exp_f32, DType, Scalar};
pub use tape::{Gradients, Op, Tape, Var};
pub use unary::{gelu, sigmoid, Unary, GELU_CUBIC, GELU_SQRT_2_OVER_PI};

use crate::error::{Error, Result};

/// Dense row-major array. Immutable once built; every operation returns a
/// fresh tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// `(outer, extent, inner)` sizes around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for buffers whose length is known to be right.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(f).collect(),
        }
    }

    /// Independent `N(0, std^2)` entries.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Independent `U[lo, hi)` entries.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: impl Into<String>) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.into() })
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    fn same_shape(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn zip_with(&self, op: &'static str, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(op, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with("mul", other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn unary(&self, kind: Unary) -> Self {
        // One loop per kind so each body inlines and vectorizes.
        match kind {
            Unary::Identity => self.clone(),
            Unary::Sigmoid => self.map(|v| Unary::Sigmoid.apply(v)),
            Unary::Gelu => self.map(|v| Unary::Gelu.apply(v)),
            Unary::Silu => self.map(|v| Unary::Silu.apply(v)),
            Unary::Square => self.map(|v| v * v),
        }
    }

    /// `self * (1 + scale) + shift`, all three of equal shape.
    pub fn scale_shift(&self, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Self> {
        self.same_shape("scale_shift", scale)?;
        self.same_shape("scale_shift", shift)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&scale.data)
                .zip(&shift.data)
                .map(|((x, s), b)| *x * (T::one() + *s) + *b)
                .collect(),
        })
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            MatRef::row_major(&self.data, k),
            MatRef::row_major(&other.data, n),
            T::zero(),
            MatMut::row_major(&mut out, n),
        );
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::invalid("transpose2", format!("rank {} tensor", self.rank())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op,
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += *v;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let sum = self.sum_axis(axis)?;
        let n = T::from_usize(self.shape[axis]).unwrap();
        Ok(sum.map(|v| v / n))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis("slice_axis", axis)?;
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::invalid(
                "slice_axis",
                format!("range {start}..{} exceeds extent {}", start + len, self.shape[axis]),
            ));
        }
        let (outer, ext, inner) = split_at_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&self.data[(o * ext + start) * inner..][..len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Split into `parts` equal pieces along `axis`.
    pub fn chunk(&self, parts: usize, axis: usize) -> Result<Vec<Self>> {
        self.check_axis("chunk", axis)?;
        let extent = self.shape[axis];
        if parts == 0 || !extent.is_multiple_of(parts) {
            return Err(Error::IndivisibleChunk { axis, extent, parts });
        }
        let len = extent / parts;
        (0..parts).map(|p| self.slice_axis(axis, p * len, len)).collect()
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no parts"))?;
        first.check_axis("concat", axis)?;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * block..][..block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Repeat an extent-1 axis `count` times.
    pub fn expand(&self, axis: usize, count: usize) -> Result<Self> {
        self.check_axis("expand", axis)?;
        if self.shape[axis] != 1 || count == 0 {
            return Err(Error::invalid(
                "expand",
                format!("axis {axis} of {:?} must have extent 1", self.shape),
            ));
        }
        let (outer, _, inner) = split_at_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let row = &self.data[o * inner..][..inner];
            for _ in 0..count {
                out.extend_from_slice(row);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = count;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Reorder rows of a `[batch, n, d]` tensor: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if self.rank() != 3 || perm.len() != self.shape[1] {
            return Err(Error::invalid("permute_rows", "expects [batch, n, d] and a length-n permutation"));
        }
        let (b, n, d) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = Vec::with_capacity(self.data.len());
        for bi in 0..b {
            for &src in perm {
                out.extend_from_slice(&self.data[(bi * n + src) * d..][..d]);
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f64>::scalar(3.0).item().unwrap(), 3.0);
    }

    #[test]
    fn matmul_small_cases() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul(&m).unwrap(), m);
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn mean_and_chunk() {
        let x = t(&[2], &[1.0, 3.0]);
        assert_eq!(x.mean_axis(0).unwrap().data(), &[2.0]);
        let y = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let parts = y.chunk(2, 0).unwrap();
        assert_eq!(parts[0].data(), &[1.0, 2.0]);
        assert_eq!(parts[1].data(), &[3.0, 4.0]);
        assert!(matches!(y.chunk(3, 0), Err(Error::IndivisibleChunk { .. })));
    }

    #[test]
    fn chunk_concat_middle_axis() {
        let x = Tensor::<f64>::from_fn(vec![2, 6, 3], |i| i as f64);
        let parts = x.chunk(3, 1).unwrap();
        assert_eq!(parts[1].shape(), &[2, 2, 3]);
        assert_eq!(parts[1].at(&[1, 0, 2]), x.at(&[1, 2, 2]));
        let refs: Vec<_> = parts.iter().collect();
        assert_eq!(Tensor::concat(&refs, 1).unwrap(), x);
    }

    #[test]
    fn expand_repeats_rows() {
        let x = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let e = x.expand(1, 3).unwrap();
        assert_eq!(e.shape(), &[2, 3, 2]);
        assert_eq!(e.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        assert_eq!(e.sum_axis(1).unwrap().data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let x = Tensor::<f64>::from_fn(vec![3, 5], |i| i as f64 * 0.5);
        assert_eq!(x.transpose2().unwrap().transpose2().unwrap(), x);
        assert_eq!(x.transpose2().unwrap().at(&[4, 2]), x.at(&[2, 4]));
    }
}
