use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{pom_forward, MaskSpec, PoMParams};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

fn columns_to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let t = x.transpose2()?;
    let (n, d) = (t.dim(0), t.dim(1));
    t.reshape(vec![1, n, d])
}

fn rows_differ<T: Scalar>(a: &[T], b: &[T], tol: T) -> bool {
    a.iter().zip(b).any(|(x, y)| (*x - *y).abs() > tol)
}

/// Empirical contextual-mapping test on two `[d, n]` sequences:
/// (a) the outputs for `x` are pairwise distinct, and (b) every output for
/// `x` differs from every output for `x_prime`, both beyond `tol` in max norm.
pub fn contextual_distinctness_check<T: Scalar>(
    params: &PoMParams<T>,
    x: &Tensor<T>,
    x_prime: &Tensor<T>,
    tol: T,
) -> Result<bool> {
    let d = params.dim;
    let q = pom_forward(&columns_to_tokens(x)?, None, params, &MaskSpec::None)?;
    let q_prime = pom_forward(&columns_to_tokens(x_prime)?, None, params, &MaskSpec::None)?;
    let rows: Vec<&[T]> = q.data().chunks_exact(d).collect();
    let rows_prime: Vec<&[T]> = q_prime.data().chunks_exact(d).collect();

    let pairwise = rows
        .iter()
        .enumerate()
        .all(|(i, a)| rows[i + 1..].iter().all(|b| rows_differ(a, b, tol)));
    let across = rows
        .iter()
        .all(|a| rows_prime.iter().all(|b| rows_differ(a, b, tol)));
    Ok(pairwise && across)
}

/// Outcome of a seed-pinned batch of distinctness trials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistinctnessReport {
    pub trials: usize,
    pub passed: usize,
}

impl DistinctnessReport {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.trials as f64
    }
}

/// Monte-Carlo distinctness rate: each trial draws fresh Gaussian weights
/// (std `1/sqrt(d)`), a Gaussian `[d, n]` sequence `X`, and `X'` equal to
/// `X` with one column redrawn.
pub fn distinctness_trials(
    trials: usize,
    dim: usize,
    len: usize,
    degree: usize,
    expand: usize,
    tol: f64,
    seed: u64,
) -> Result<DistinctnessReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (dim as f64).sqrt();
    let mut passed = 0;
    for _ in 0..trials {
        let params = PoMParams::<f64>::init(dim, degree, expand, true, std, &mut rng)?;
        let x = Tensor::<f64>::randn(vec![dim, len], 1.0, &mut rng);
        let col = rng.random_range(0..len);
        let fresh = Tensor::<f64>::randn(vec![dim], 1.0, &mut rng);
        let mut data = x.data().to_vec();
        for r in 0..dim {
            data[r * len + col] = fresh.data()[r];
        }
        let x_prime = Tensor::new(vec![dim, len], data)?;
        if contextual_distinctness_check(&params, &x, &x_prime, tol)? {
            passed += 1;
        }
    }
    Ok(DistinctnessReport { trials, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_fail_the_cross_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = PoMParams::<f64>::init(4, 3, 1, true, 0.5, &mut rng).unwrap();
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        assert!(!contextual_distinctness_check(&p, &x, &x, 1e-8).unwrap());
    }

    #[test]
    fn repeated_columns_fail_the_pairwise_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = PoMParams::<f64>::init(4, 3, 1, true, 0.5, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(vec![4, 6], 1.0, &mut rng);
        let mut data = x.data().to_vec();
        for r in 0..4 {
            data[r * 6 + 5] = data[r * 6 + 1];
        }
        let dup = Tensor::new(vec![4, 6], data).unwrap();
        let other = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        assert!(!contextual_distinctness_check(&p, &dup, &other, 1e-8).unwrap());
    }

    #[test]
    fn random_sequences_are_distinct() {
        let report = distinctness_trials(50, 4, 6, 3, 1, 1e-8, 5).unwrap();
        assert_eq!(report.passed, 50);
    }
}
