use super::mix::masked_value;
use super::{select, PoMParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Recurrent mixer state for one sequence: the running sum of polynomial
/// features and the number of tokens absorbed.
///
/// Feeding tokens one at a time and querying after each reproduces the
/// `Causal` parallel forward; feeding whole blocks reproduces
/// `BlockCausal(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoMState<T: Scalar = f64> {
    sum: Vec<T>,
    count: usize,
    normalize: bool,
    empty_queries: usize,
}

impl<T: Scalar> PoMState<T> {
    pub fn init(params: &PoMParams<T>) -> Self {
        PoMState {
            sum: vec![T::zero(); params.state_width()],
            count: 0,
            normalize: params.normalize,
            empty_queries: 0,
        }
    }

    pub fn sum(&self) -> &[T] {
        &self.sum
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Queries answered while the state was still empty.
    pub fn empty_queries(&self) -> usize {
        self.empty_queries
    }

    /// Absorb one token's expanded features.
    pub fn update(&mut self, features: &[T]) -> Result<()> {
        if features.len() != self.sum.len() {
            return Err(Error::invalid(
                "state_update",
                format!("features have width {}, state has {}", features.len(), self.sum.len()),
            ));
        }
        for (s, f) in self.sum.iter_mut().zip(features) {
            *s += *f;
        }
        self.count += 1;
        Ok(())
    }

    /// Absorb a `[b, k*D]` (or `[1, b, k*D]`) block of expanded features.
    pub fn update_block(&mut self, block: &Tensor<T>) -> Result<()> {
        let width = *block.shape().last().unwrap_or(&0);
        if width != self.sum.len() {
            return Err(Error::invalid(
                "state_update_block",
                format!("block {:?} does not end in width {}", block.shape(), self.sum.len()),
            ));
        }
        for row in block.data().chunks_exact(width) {
            self.update(row)?;
        }
        Ok(())
    }

    /// Current normalised state as a `[1, 1, k*D]` tensor.
    pub fn value(&self) -> Tensor<T> {
        let data = self
            .sum
            .iter()
            .map(|s| masked_value(*s, self.count, self.normalize))
            .collect();
        Tensor::from_parts(vec![1, 1, self.sum.len()], data)
    }

    /// Answer `[m, d]` (or `[1, m, d]`) query tokens against the state.
    pub fn query(&mut self, xq: &Tensor<T>, params: &PoMParams<T>) -> Result<Tensor<T>> {
        let shape = xq.shape().to_vec();
        let tokens = match shape.as_slice() {
            [m, d] if *d == params.dim => xq.reshape(vec![1, *m, *d])?,
            [1, _, d] if *d == params.dim => xq.clone(),
            _ => {
                return Err(Error::invalid(
                    "state_query",
                    format!("queries must be [m, {}], got {shape:?}", params.dim),
                ))
            }
        };
        if self.count == 0 {
            self.empty_queries += 1;
        }
        let out = select(&tokens, params, &self.value())?;
        out.reshape(shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pom::{polynomial_expand, MASK_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_empty() {
        let p = PoMParams::<f64>::zeros(3, 2, 2, true).unwrap();
        let s = PoMState::init(&p);
        assert_eq!(s.count(), 0);
        assert!(s.sum().iter().all(|v| *v == 0.0));
        assert_eq!(s.sum().len(), 12);
    }

    #[test]
    fn one_update_returns_the_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = PoMParams::<f64>::init(3, 2, 1, true, 0.5, &mut rng).unwrap();
        let x = Tensor::randn(vec![1, 1, 3], 1.0, &mut rng);
        let f = polynomial_expand(&x, &p, p.activation).unwrap();
        let mut s = PoMState::init(&p);
        s.update(f.data()).unwrap();
        assert_eq!(s.count(), 1);
        for (v, fv) in s.value().data().iter().zip(f.data()) {
            assert!((v - fv / (1.0 + MASK_EPS)).abs() < 1e-18);
            assert!((v - fv).abs() < 1e-6 * fv.abs().max(1.0));
        }
    }

    #[test]
    fn query_before_update_is_zero_state_with_warning() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = PoMParams::<f64>::init(3, 2, 1, false, 0.5, &mut rng).unwrap();
        p.b_out = None;
        let mut s = PoMState::init(&p);
        let x = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let out = s.query(&x, &p).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
        assert_eq!(s.empty_queries(), 1);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let p = PoMParams::<f64>::zeros(3, 2, 1, true).unwrap();
        let mut s = PoMState::init(&p);
        assert!(s.update(&[1.0, 2.0]).is_err());
        assert!(s.update_block(&Tensor::zeros(vec![2, 5])).is_err());
    }
}
