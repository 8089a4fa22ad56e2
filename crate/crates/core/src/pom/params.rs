use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Unary, Var};

/// Learnable weights of one Polynomial Mixer.
///
/// Weights use the `[out, in]` layout: `w_poly` and `w_sel` are
/// `[k*D, d]`, `w_out` is `[d, k*D]`, with `D = expand * d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoMParams<T: Scalar = f64> {
    pub dim: usize,
    pub degree: usize,
    pub expand: usize,
    pub w_poly: Tensor<T>,
    pub b_poly: Option<Tensor<T>>,
    pub w_sel: Tensor<T>,
    pub b_sel: Option<Tensor<T>>,
    pub w_out: Tensor<T>,
    pub b_out: Option<Tensor<T>>,
    /// Activation `h` applied before the running products.
    pub activation: Unary,
    /// Mean mixing when true, plain sums otherwise.
    pub normalize: bool,
}

/// Tape handles for a bound [`PoMParams`].
#[derive(Clone, Debug)]
pub struct PoMVars {
    pub degree: usize,
    pub activation: Unary,
    pub normalize: bool,
    pub w_poly: Var,
    pub b_poly: Option<Var>,
    pub w_sel: Var,
    pub b_sel: Option<Var>,
    pub w_out: Var,
    pub b_out: Option<Var>,
}

impl PoMVars {
    /// Handles in the order of [`PoMParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.w_poly];
        v.extend(self.b_poly);
        v.push(self.w_sel);
        v.extend(self.b_sel);
        v.push(self.w_out);
        v.extend(self.b_out);
        v
    }
}

impl<T: Scalar> PoMParams<T> {
    /// Width of the polynomial state, `k * D`.
    pub fn state_width(&self) -> usize {
        self.degree * self.expand * self.dim
    }

    /// Gaussian weights with standard deviation `std` and zero biases.
    pub fn init(dim: usize, degree: usize, expand: usize, bias: bool, std: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::check_dims(dim, degree, expand)?;
        let width = degree * expand * dim;
        let mut p = Self::zeros(dim, degree, expand, bias)?;
        p.w_poly = Tensor::randn(vec![width, dim], std, rng);
        p.w_sel = Tensor::randn(vec![width, dim], std, rng);
        p.w_out = Tensor::randn(vec![dim, width], std, rng);
        Ok(p)
    }

    pub fn zeros(dim: usize, degree: usize, expand: usize, bias: bool) -> Result<Self> {
        Self::check_dims(dim, degree, expand)?;
        let width = degree * expand * dim;
        let bias_of = |n: usize| bias.then(|| Tensor::zeros(vec![n]));
        Ok(PoMParams {
            dim,
            degree,
            expand,
            w_poly: Tensor::zeros(vec![width, dim]),
            b_poly: bias_of(width),
            w_sel: Tensor::zeros(vec![width, dim]),
            b_sel: bias_of(width),
            w_out: Tensor::zeros(vec![dim, width]),
            b_out: bias_of(dim),
            activation: Unary::Gelu,
            normalize: true,
        })
    }

    fn check_dims(dim: usize, degree: usize, expand: usize) -> Result<()> {
        if dim == 0 || degree == 0 || expand == 0 {
            return Err(Error::Config(format!(
                "PoM needs positive dim, degree and expand (got {dim}, {degree}, {expand})"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_dims(self.dim, self.degree, self.expand)?;
        let width = self.state_width();
        let expect = |name: &str, t: &Tensor<T>, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::invalid(
                    "pom params",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            t.ensure_finite(format!("pom params {name}"))
        };
        expect("w_poly", &self.w_poly, &[width, self.dim])?;
        expect("w_sel", &self.w_sel, &[width, self.dim])?;
        expect("w_out", &self.w_out, &[self.dim, width])?;
        if let Some(b) = &self.b_poly {
            expect("b_poly", b, &[width])?;
        }
        if let Some(b) = &self.b_sel {
            expect("b_sel", b, &[width])?;
        }
        if let Some(b) = &self.b_out {
            expect("b_out", b, &[self.dim])?;
        }
        Ok(())
    }

    /// Number of scalars in the three projections and their biases.
    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("w_poly", &self.w_poly)];
        if let Some(b) = &self.b_poly {
            v.push(("b_poly", b));
        }
        v.push(("w_sel", &self.w_sel));
        if let Some(b) = &self.b_sel {
            v.push(("b_sel", b));
        }
        v.push(("w_out", &self.w_out));
        if let Some(b) = &self.b_out {
            v.push(("b_out", b));
        }
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![("w_poly", &mut self.w_poly)];
        if let Some(b) = &mut self.b_poly {
            v.push(("b_poly", b));
        }
        v.push(("w_sel", &mut self.w_sel));
        if let Some(b) = &mut self.b_sel {
            v.push(("b_sel", b));
        }
        v.push(("w_out", &mut self.w_out));
        if let Some(b) = &mut self.b_out {
            v.push(("b_out", b));
        }
        v
    }

    /// Register every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> PoMVars {
        self.bind_with(tape, true)
    }

    /// Register every tensor as a constant leaf (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> PoMVars {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, trainable: bool) -> PoMVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let w_poly = leaf(&self.w_poly);
        let b_poly = self.b_poly.as_ref().map(&mut leaf);
        let w_sel = leaf(&self.w_sel);
        let b_sel = self.b_sel.as_ref().map(&mut leaf);
        let w_out = leaf(&self.w_out);
        let b_out = self.b_out.as_ref().map(&mut leaf);
        PoMVars {
            degree: self.degree,
            activation: self.activation,
            normalize: self.normalize,
            w_poly,
            b_poly,
            w_sel,
            b_sel,
            w_out,
            b_out,
        }
    }
}
