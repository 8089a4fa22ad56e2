use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const BASE: f64 = 10_000.0;

/// Sinusoidal positional encodings for tokens on a 1, 2 or 3 axis grid.
///
/// `positions` holds `axes` coordinates per token, token-major. Each axis
/// gets `d / axes` channels: `sin(p w_i)` for every frequency, then
/// `cos(p w_i)`, with `w_i = BASE^(-i / half)`. The result is `[n, d]`.
pub fn sinusoidal_pe<T: Scalar>(positions: &[f64], d: usize, axes: usize) -> Result<Tensor<T>> {
    if !(1..=3).contains(&axes) {
        return Err(Error::invalid("sinusoidal_pe", format!("axes must be 1, 2 or 3, got {axes}")));
    }
    if d == 0 || !d.is_multiple_of(2 * axes) {
        return Err(Error::invalid(
            "sinusoidal_pe",
            format!("d = {d} must be a positive multiple of {}", 2 * axes),
        ));
    }
    if positions.is_empty() || !positions.len().is_multiple_of(axes) {
        return Err(Error::invalid(
            "sinusoidal_pe",
            format!("{} coordinates do not form {axes}-axis positions", positions.len()),
        ));
    }
    let n = positions.len() / axes;
    let per_axis = d / axes;
    let half = per_axis / 2;
    let freqs: Vec<f64> = (0..half).map(|i| BASE.powf(-(i as f64) / half as f64)).collect();
    let mut out = Vec::with_capacity(n * d);
    for coords in positions.chunks_exact(axes) {
        for &p in coords {
            out.extend(freqs.iter().map(|w| T::lit((p * w).sin())));
            out.extend(freqs.iter().map(|w| T::lit((p * w).cos())));
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Row-major coordinates of every cell of a grid with the given extents.
pub fn grid_positions(extents: &[usize]) -> Vec<f64> {
    let total: usize = extents.iter().product();
    let mut out = Vec::with_capacity(total * extents.len());
    for flat in 0..total {
        let mut rem = flat;
        let mut coords = vec![0.0; extents.len()];
        for (axis, &e) in extents.iter().enumerate().rev() {
            coords[axis] = (rem % e) as f64;
            rem /= e;
        }
        out.extend(coords);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_zero_sines_unit_cosines() {
        let pe = sinusoidal_pe::<f64>(&[0.0], 8, 1).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0; 4]);
        assert_eq!(&pe.data()[4..], &[1.0; 4]);
    }

    #[test]
    fn two_axis_is_concatenation_of_one_axis_halves() {
        let pe2 = sinusoidal_pe::<f64>(&[3.0, 5.0], 16, 2).unwrap();
        let a = sinusoidal_pe::<f64>(&[3.0], 8, 1).unwrap();
        let b = sinusoidal_pe::<f64>(&[5.0], 8, 1).unwrap();
        assert_eq!(&pe2.data()[..8], a.data());
        assert_eq!(&pe2.data()[8..], b.data());
    }

    #[test]
    fn indivisible_width_is_rejected() {
        assert!(sinusoidal_pe::<f64>(&[0.0, 1.0], 6, 2).is_err());
        assert!(sinusoidal_pe::<f64>(&[0.0], 8, 4).is_err());
        assert!(sinusoidal_pe::<f64>(&[0.0, 1.0, 2.0], 8, 2).is_err());
    }

    #[test]
    fn grid_is_row_major() {
        assert_eq!(grid_positions(&[2, 3]), vec![0., 0., 0., 1., 0., 2., 1., 0., 1., 1., 1., 2.]);
    }
}
