use super::MaskSpec;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Added to masked token counts before dividing.
pub const MASK_EPS: f64 = 1e-7;

/// Mixed state together with the number of query rows whose mask selected
/// no context token at all. Such rows carry a zero state.
#[derive(Clone, Debug)]
pub struct MixOutput<T: Scalar> {
    pub state: Tensor<T>,
    pub empty_rows: usize,
}

/// `sum / (eps + count)` under mean semantics, `sum` otherwise.
#[inline]
pub(crate) fn masked_value<T: Scalar>(sum: T, count: usize, normalize: bool) -> T {
    if normalize {
        sum / (T::lit(MASK_EPS) + T::from_usize(count).unwrap())
    } else {
        sum
    }
}

fn dims<T: Scalar>(h: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if h.rank() != 3 {
        return Err(Error::invalid("mix", format!("features must be [batch, n, kD], got {:?}", h.shape())));
    }
    Ok((h.dim(0), h.dim(1), h.dim(2)))
}

/// Mix polynomial features `[batch, n, F]` over the token axis.
///
/// `None` and `Padding` produce one state per batch (`[batch, 1, F]`); the
/// causal family and `Full` produce one state per query row.
pub fn mix<T: Scalar>(features: &Tensor<T>, mask: &MaskSpec, normalize: bool) -> Result<MixOutput<T>> {
    mix_forward(features, mask, normalize)
}

pub(crate) fn mix_forward<T: Scalar>(h: &Tensor<T>, mask: &MaskSpec, normalize: bool) -> Result<MixOutput<T>> {
    let (batch, n, f) = dims(h)?;
    let queries = match mask {
        MaskSpec::Full { queries, .. } => *queries,
        _ => n,
    };
    mask.validate(batch, queries, n)?;
    let data = h.data();
    let mut empty_rows = 0;

    let state = match mask {
        MaskSpec::None => {
            let mut out = vec![T::zero(); batch * f];
            let count = T::from_usize(n).unwrap();
            for b in 0..batch {
                let acc = &mut out[b * f..][..f];
                for row in data[b * n * f..][..n * f].chunks_exact(f) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += *v;
                    }
                }
                if normalize {
                    acc.iter_mut().for_each(|a| *a /= count);
                }
            }
            Tensor::from_parts(vec![batch, 1, f], out)
        }
        MaskSpec::Padding { valid, .. } => {
            let mut out = vec![T::zero(); batch * f];
            for b in 0..batch {
                let acc = &mut out[b * f..][..f];
                let mut count = 0usize;
                for (j, row) in data[b * n * f..][..n * f].chunks_exact(f).enumerate() {
                    if valid[b * n + j] {
                        count += 1;
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += *v;
                        }
                    }
                }
                if count == 0 {
                    empty_rows += 1;
                } else if normalize {
                    let c = T::from_usize(count).unwrap();
                    acc.iter_mut().for_each(|a| *a /= c);
                }
            }
            Tensor::from_parts(vec![batch, 1, f], out)
        }
        MaskSpec::Causal | MaskSpec::BlockCausal(_) => {
            let block = mask.block_size().unwrap();
            let mut out = vec![T::zero(); batch * n * f];
            let mut acc = vec![T::zero(); f];
            for b in 0..batch {
                acc.iter_mut().for_each(|a| *a = T::zero());
                let mut start = 0;
                while start < n {
                    let end = (start + block).min(n);
                    for row in data[(b * n + start) * f..(b * n + end) * f].chunks_exact(f) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += *v;
                        }
                    }
                    for i in start..end {
                        let dst = &mut out[(b * n + i) * f..][..f];
                        for (o, a) in dst.iter_mut().zip(&acc) {
                            *o = masked_value(*a, end, normalize);
                        }
                    }
                    start = end;
                }
            }
            Tensor::from_parts(vec![batch, n, f], out)
        }
        MaskSpec::Full { queries, visible, .. } => {
            let m = *queries;
            let mut out = vec![T::zero(); batch * m * f];
            for b in 0..batch {
                for i in 0..m {
                    let dst = &mut out[(b * m + i) * f..][..f];
                    let mut count = 0usize;
                    for j in 0..n {
                        if visible[(b * m + i) * n + j] {
                            count += 1;
                            for (a, v) in dst.iter_mut().zip(&data[(b * n + j) * f..][..f]) {
                                *a += *v;
                            }
                        }
                    }
                    if count == 0 {
                        empty_rows += 1;
                    }
                    dst.iter_mut().for_each(|a| *a = masked_value(*a, count, normalize));
                }
            }
            Tensor::from_parts(vec![batch, m, f], out)
        }
    };
    Ok(MixOutput { state, empty_rows })
}

pub(crate) fn mix_backward<T: Scalar>(
    h_shape: &[usize],
    g: &Tensor<T>,
    mask: &MaskSpec,
    normalize: bool,
) -> Result<Tensor<T>> {
    let (batch, n, f) = (h_shape[0], h_shape[1], h_shape[2]);
    let gd = g.data();
    let mut dh = vec![T::zero(); batch * n * f];

    match mask {
        MaskSpec::None => {
            let scale = if normalize {
                T::one() / T::from_usize(n).unwrap()
            } else {
                T::one()
            };
            for b in 0..batch {
                let grow = &gd[b * f..][..f];
                for row in dh[b * n * f..][..n * f].chunks_exact_mut(f) {
                    for (d, gv) in row.iter_mut().zip(grow) {
                        *d = *gv * scale;
                    }
                }
            }
        }
        MaskSpec::Padding { valid, .. } => {
            for b in 0..batch {
                let count = valid[b * n..][..n].iter().filter(|v| **v).count();
                if count == 0 {
                    continue;
                }
                let scale = if normalize {
                    T::one() / T::from_usize(count).unwrap()
                } else {
                    T::one()
                };
                let grow = &gd[b * f..][..f];
                for (j, row) in dh[b * n * f..][..n * f].chunks_exact_mut(f).enumerate() {
                    if valid[b * n + j] {
                        for (d, gv) in row.iter_mut().zip(grow) {
                            *d = *gv * scale;
                        }
                    }
                }
            }
        }
        MaskSpec::Causal | MaskSpec::BlockCausal(_) => {
            let block = mask.block_size().unwrap();
            let mut carry = vec![T::zero(); f];
            for b in 0..batch {
                carry.iter_mut().for_each(|c| *c = T::zero());
                let blocks = n.div_ceil(block);
                for blk in (0..blocks).rev() {
                    let start = blk * block;
                    let end = (start + block).min(n);
                    for i in start..end {
                        for (c, gv) in carry.iter_mut().zip(&gd[(b * n + i) * f..][..f]) {
                            *c += masked_value(*gv, end, normalize);
                        }
                    }
                    for j in start..end {
                        dh[(b * n + j) * f..][..f].copy_from_slice(&carry);
                    }
                }
            }
        }
        MaskSpec::Full { queries, visible, .. } => {
            let m = *queries;
            for b in 0..batch {
                for i in 0..m {
                    let row_mask = &visible[(b * m + i) * n..][..n];
                    let count = row_mask.iter().filter(|v| **v).count();
                    let grow = &gd[(b * m + i) * f..][..f];
                    for j in 0..n {
                        if row_mask[j] {
                            for (d, gv) in dh[(b * n + j) * f..][..f].iter_mut().zip(grow) {
                                *d += masked_value(*gv, count, normalize);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(h_shape.to_vec(), dh))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(values: &[f64]) -> Tensor {
        Tensor::new(vec![1, values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn mean_and_sum_forms() {
        let h = feats(&[1.0, 3.0]);
        assert_eq!(mix(&h, &MaskSpec::None, true).unwrap().state.data(), &[2.0]);
        assert_eq!(mix(&h, &MaskSpec::None, false).unwrap().state.data(), &[4.0]);
    }

    #[test]
    fn padding_skips_invalid_tokens() {
        let h = feats(&[1.0, 100.0, 3.0]);
        let mask = MaskSpec::padding(1, 3, &[1, 0, 1]).unwrap();
        let out = mix(&h, &mask, true).unwrap();
        assert_eq!(out.state.data(), &[2.0]);
        assert_eq!(out.empty_rows, 0);
    }

    #[test]
    fn all_zero_rows_give_zero_state_and_a_warning() {
        let h = feats(&[1.0, 2.0]);
        let pad = MaskSpec::padding(1, 2, &[0, 0]).unwrap();
        let out = mix(&h, &pad, true).unwrap();
        assert_eq!(out.state.data(), &[0.0]);
        assert_eq!(out.empty_rows, 1);

        let full = MaskSpec::full(1, 2, 2, &[0, 0, 1, 1]).unwrap();
        let out = mix(&h, &full, true).unwrap();
        assert_eq!(out.state.data()[0], 0.0);
        assert!(out.state.is_finite());
        assert_eq!(out.empty_rows, 1);
    }

    #[test]
    fn block_causal_rows_average_visible_prefix() {
        let h = feats(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = mix(&h, &MaskSpec::BlockCausal(2), false).unwrap().state;
        assert_eq!(out.data(), &[3.0, 3.0, 10.0, 10.0, 15.0]);
        let out = mix(&h, &MaskSpec::BlockCausal(2), true).unwrap().state;
        let expected = 3.0 / (2.0 + MASK_EPS);
        assert!((out.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn causal_equals_block_causal_one_bitwise() {
        let h = Tensor::<f64>::from_fn(vec![2, 7, 3], |i| ((i * 37 % 11) as f64 - 5.0) * 0.3);
        let a = mix(&h, &MaskSpec::Causal, true).unwrap().state;
        let b = mix(&h, &MaskSpec::BlockCausal(1), true).unwrap().state;
        assert_eq!(a, b);
    }

    #[test]
    fn mask_extent_mismatch_is_an_error() {
        let h = feats(&[1.0, 2.0, 3.0]);
        let pad = MaskSpec::padding(1, 2, &[1, 1]).unwrap();
        assert!(mix(&h, &pad, true).is_err());
    }
}
