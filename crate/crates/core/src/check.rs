//! Property suites behind `pom check`.
//!
//! Each suite draws seed-pinned random cases in f64 and reports the worst
//! deviation it saw against its tolerance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::pom::{distinctness_trials, polynomial_expand, pom_forward, MaskSpec, PoMParams, PoMState};
use crate::tensor::{Tensor, Unary};

pub const EQUIVARIANCE_TOL: f64 = 1e-9;
pub const REFERENCE_TOL: f64 = 1e-12;
pub const STREAMING_TOL: f64 = 1e-10;
pub const MASK_TOL: f64 = 1e-12;
pub const DELETION_TOL: f64 = 1e-9;
pub const DISTINCTNESS_TOL: f64 = 1e-8;
pub const DISTINCTNESS_MIN_FRACTION: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    pub fn summary(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} {:<13} {:>5} cases  {}", self.name, self.cases, self.detail)
    }
}

fn params(rng: &mut ChaCha8Rng, dim: usize, degree: usize, expand: usize) -> Result<PoMParams<f64>> {
    let std = 1.0 / (dim as f64).sqrt();
    let mut p = PoMParams::<f64>::init(dim, degree, expand, true, std, rng)?;
    for (_, b) in p.named_tensors_mut() {
        if b.rank() == 1 {
            *b = Tensor::randn(b.shape().to_vec(), 0.1, rng);
        }
    }
    Ok(p)
}

/// Scalar-loop evaluation of the self-mixing forward pass for one
/// `[n, d]` sequence without a mask.
fn reference_forward(x: &[f64], n: usize, p: &PoMParams<f64>) -> Vec<f64> {
    let d = p.dim;
    let width = p.state_width();
    let chunk = width / p.degree;
    let linear = |w: &Tensor<f64>, b: &Option<Tensor<f64>>, row: usize, v: &[f64]| -> f64 {
        let cols = w.dim(1);
        let mut acc = b.as_ref().map_or(0.0, |b| b.data()[row]);
        for (j, vj) in v.iter().enumerate() {
            acc += w.data()[row * cols + j] * vj;
        }
        acc
    };
    let mut state = vec![0.0; width];
    for t in 0..n {
        let tok = &x[t * d..(t + 1) * d];
        let act: Vec<f64> = (0..width).map(|r| p.activation.apply(linear(&p.w_poly, &p.b_poly, r, tok))).collect();
        let mut prod = act.clone();
        for m in 1..p.degree {
            for i in 0..chunk {
                prod[m * chunk + i] = act[m * chunk + i] * prod[(m - 1) * chunk + i];
            }
        }
        for (s, v) in state.iter_mut().zip(&prod) {
            *s += v / n as f64;
        }
    }
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let tok = &x[t * d..(t + 1) * d];
        let gated: Vec<f64> = (0..width)
            .map(|r| Unary::Sigmoid.apply(linear(&p.w_sel, &p.b_sel, r, tok)) * state[r])
            .collect();
        for o in 0..d {
            out[t * d + o] = linear(&p.w_out, &p.b_out, o, &gated);
        }
    }
    out
}

/// Permutation equivariance, checked together with agreement against a
/// scalar-loop evaluation so that equivariant but wrong outputs also fail.
pub fn equivariance_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_perm, mut worst_ref) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let d = rng.random_range(1..=32);
        let n = rng.random_range(1..=64);
        let degree = rng.random_range(1..=4);
        let expand = rng.random_range(1..=2);
        let p = params(&mut rng, d, degree, expand)?;
        let x = Tensor::randn(vec![1, n, d], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);

        let y = pom_forward(&x, None, &p, &MaskSpec::None)?;
        let y_perm = pom_forward(&x.permute_rows(&perm)?, None, &p, &MaskSpec::None)?;
        worst_perm = worst_perm.max(y_perm.max_abs_diff(&y.permute_rows(&perm)?)?);

        let reference = reference_forward(x.data(), n, &p);
        let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let dev = y.data().iter().zip(&reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst_ref = worst_ref.max(dev / scale);
    }
    Ok(SuiteResult {
        name: "equivariance",
        cases,
        passed: worst_perm <= EQUIVARIANCE_TOL && worst_ref <= REFERENCE_TOL,
        detail: format!(
            "max |PoM(XP) - PoM(X)P| = {worst_perm:.3e} (tol {EQUIVARIANCE_TOL:.0e}), \
             max scaled deviation from scalar loop = {worst_ref:.3e} (tol {REFERENCE_TOL:.0e})"
        ),
    })
}

/// Token-by-token and block-by-block recurrent evaluation against the
/// masked parallel forward pass.
pub fn streaming_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, degree, expand) = (6, 2, 2);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 8..=65 {
        let p = params(&mut rng, d, degree, expand)?;
        let x = Tensor::randn(vec![1, n, d], 1.0, &mut rng);
        let features = polynomial_expand(&x, &p, p.activation)?;
        let width = p.state_width();

        let parallel = pom_forward(&x, None, &p, &MaskSpec::Causal)?;
        let mut state = PoMState::init(&p);
        for i in 0..n {
            state.update(&features.data()[i * width..(i + 1) * width])?;
            let out = state.query(&x.slice_axis(1, i, 1)?, &p)?;
            worst = worst.max(out.max_abs_diff(&parallel.slice_axis(1, i, 1)?)?);
        }
        cases += 1;

        for k in [1, 2, 4, 7] {
            let parallel = pom_forward(&x, None, &p, &MaskSpec::block_causal(k)?)?;
            let mut state = PoMState::init(&p);
            for start in (0..n).step_by(k) {
                let len = k.min(n - start);
                state.update_block(&features.slice_axis(1, start, len)?)?;
                let out = state.query(&x.slice_axis(1, start, len)?, &p)?;
                worst = worst.max(out.max_abs_diff(&parallel.slice_axis(1, start, len)?)?);
            }
            cases += 1;
        }
    }
    Ok(SuiteResult {
        name: "streaming",
        cases,
        passed: worst <= STREAMING_TOL,
        detail: format!("max |stream - parallel| = {worst:.3e} (tol {STREAMING_TOL:.0e})"),
    })
}

/// `Causal` equals `BlockCausal(1)` bitwise, and an explicit full mask
/// with the causal pattern agrees with both.
pub fn mask_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bitwise = true;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (b, n, d) = (rng.random_range(1..=3), rng.random_range(1..=20), rng.random_range(1..=8));
        let degree = rng.random_range(1..=3);
        let p = params(&mut rng, d, degree, 1)?;
        let x = Tensor::randn(vec![b, n, d], 1.0, &mut rng);
        let causal = pom_forward(&x, None, &p, &MaskSpec::Causal)?;
        let block1 = pom_forward(&x, None, &p, &MaskSpec::BlockCausal(1))?;
        bitwise &= causal.data().iter().zip(block1.data()).all(|(a, c)| a.to_bits() == c.to_bits());
        let pattern: Vec<u8> = (0..b * n * n).map(|idx| u8::from(idx % n <= (idx / n) % n)).collect();
        let full = pom_forward(&x, None, &p, &MaskSpec::full(b, n, n, &pattern)?)?;
        worst = worst.max(full.max_abs_diff(&causal)?);
    }
    Ok(SuiteResult {
        name: "masks",
        cases,
        passed: bitwise && worst <= MASK_TOL,
        detail: format!(
            "causal == block-causal(1) bitwise: {bitwise}; max |full - causal| = {worst:.3e} (tol {MASK_TOL:.0e})"
        ),
    })
}

/// Masking a context token out with `Padding` equals deleting it.
pub fn deletion_suite(seed: u64, cases: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (m, n, d) = (rng.random_range(1..=10), rng.random_range(2..=20), rng.random_range(1..=8));
        let degree = rng.random_range(1..=3);
        let p = params(&mut rng, d, degree, 1)?;
        let xq = Tensor::randn(vec![1, m, d], 1.0, &mut rng);
        let xc = Tensor::randn(vec![1, n, d], 1.0, &mut rng);
        let j = rng.random_range(0..n);
        let valid: Vec<u8> = (0..n).map(|i| u8::from(i != j)).collect();
        let masked = pom_forward(&xq, Some(&xc), &p, &MaskSpec::padding(1, n, &valid)?)?;
        let kept: Vec<usize> = (0..n).filter(|&i| i != j).collect();
        let parts = kept.iter().map(|&i| xc.slice_axis(1, i, 1)).collect::<Result<Vec<_>>>()?;
        let deleted = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 1)?;
        let all = vec![1u8; n - 1];
        let reduced = pom_forward(&xq, Some(&deleted), &p, &MaskSpec::padding(1, n - 1, &all)?)?;
        worst = worst.max(masked.max_abs_diff(&reduced)?);
    }
    Ok(SuiteResult {
        name: "deletion",
        cases,
        passed: worst <= DELETION_TOL,
        detail: format!("max |masked - deleted| = {worst:.3e} (tol {DELETION_TOL:.0e})"),
    })
}

/// Monte-Carlo contextual distinctness with `d = 4`, `n = 6`, `k = 3`.
pub fn distinctness_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let report = distinctness_trials(trials, 4, 6, 3, 1, DISTINCTNESS_TOL, seed)?;
    Ok(SuiteResult {
        name: "distinctness",
        cases: trials,
        passed: report.fraction() >= DISTINCTNESS_MIN_FRACTION,
        detail: format!(
            "{}/{} trials distinct = {:.3} (need {DISTINCTNESS_MIN_FRACTION})",
            report.passed,
            trials,
            report.fraction()
        ),
    })
}

/// Every suite in a fixed order, each with its own derived seed.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        equivariance_suite(seed, 200)?,
        streaming_suite(seed.wrapping_add(1))?,
        mask_suite(seed.wrapping_add(2), 50)?,
        deletion_suite(seed.wrapping_add(3), 100)?,
        distinctness_suite(seed.wrapping_add(4), 1000)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(equivariance_suite(3, 10).unwrap().passed);
        assert!(mask_suite(3, 5).unwrap().passed);
        assert!(deletion_suite(3, 10).unwrap().passed);
        assert!(distinctness_suite(3, 20).unwrap().passed);
    }
}
