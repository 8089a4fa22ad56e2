use super::{MaskSpec, PoMParams, PoMVars};
use crate::error::{Error, Result};
use crate::tensor::fault::{self, Fault};
use crate::tensor::{Scalar, Tape, Tensor, Unary, Var};

/// How the running Hadamard products are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExpandPath {
    /// One fused primitive with unrolled degree 2 to 4 kernels.
    #[default]
    Fused,
    /// Chunk, multiply and concatenate as separate primitives.
    General,
}

fn token_dims(op: &'static str, shape: &[usize], dim: usize) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[2] != dim {
        return Err(Error::invalid(
            op,
            format!("expected [batch, n, {dim}] tokens, got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1]))
}

/// Project context tokens to `k*D`, apply the activation and form the
/// running products chunk by chunk.
pub fn polynomial_expand_on<T: Scalar>(
    tape: &mut Tape<T>,
    xc: Var,
    vars: &PoMVars,
    path: ExpandPath,
) -> Result<Var> {
    let dim = tape.shape(vars.w_poly)[1];
    token_dims("polynomial_expand", tape.shape(xc), dim)?;
    let proj = tape.linear(xc, vars.w_poly, vars.b_poly)?;
    let act = tape.unary(proj, vars.activation)?;
    match path {
        ExpandPath::Fused => tape.cumulative_hadamard(act, vars.degree),
        ExpandPath::General => {
            let mut chunks = tape.chunk(act, vars.degree, 2)?;
            for m in 1..chunks.len() {
                chunks[m] = tape.mul(chunks[m], chunks[m - 1])?;
            }
            if chunks.len() == 1 {
                return Ok(chunks[0]);
            }
            tape.concat(chunks, 2)
        }
    }
}

/// Gate the mixed state with `sigmoid(W_s xq)` and project back to `d`.
pub fn select_on<T: Scalar>(tape: &mut Tape<T>, xq: Var, vars: &PoMVars, state: Var) -> Result<Var> {
    let dim = tape.shape(vars.w_sel)[1];
    let (batch, n) = token_dims("select", tape.shape(xq), dim)?;
    let width = tape.shape(vars.w_sel)[0];
    let sshape = tape.shape(state).to_vec();
    if sshape.len() != 3 || sshape[0] != batch || sshape[2] != width {
        return Err(Error::invalid(
            "select",
            format!("state must be [{batch}, 1 or {n}, {width}], got {sshape:?}"),
        ));
    }
    let state = match sshape[1] {
        r if r == n => state,
        1 => tape.expand(state, 1, n)?,
        r => {
            return Err(Error::invalid(
                "select",
                format!("state has {r} rows, expected 1 or {n}"),
            ))
        }
    };
    let s = tape.linear(xq, vars.w_sel, vars.b_sel)?;
    let gate = tape.sigmoid(s)?;
    let mut gated = tape.mul(gate, state)?;
    if fault::active(Fault::SelectSign) {
        gated = tape.scale(gated, -T::one())?;
    }
    tape.linear(gated, vars.w_out, vars.b_out)
}

/// Full mixer: expand `xc` (or `xq` for self-mixing), mix under `mask`,
/// then select per query token.
pub fn pom_forward_on<T: Scalar>(
    tape: &mut Tape<T>,
    xq: Var,
    xc: Option<Var>,
    vars: &PoMVars,
    mask: &MaskSpec,
) -> Result<Var> {
    pom_forward_path_on(tape, xq, xc, vars, mask, ExpandPath::Fused)
}

pub fn pom_forward_path_on<T: Scalar>(
    tape: &mut Tape<T>,
    xq: Var,
    xc: Option<Var>,
    vars: &PoMVars,
    mask: &MaskSpec,
    path: ExpandPath,
) -> Result<Var> {
    let xc = xc.unwrap_or(xq);
    if tape.shape(xq)[0] != tape.shape(xc)[0] {
        return Err(Error::shape("pom_forward", tape.shape(xq), tape.shape(xc)));
    }
    let features = polynomial_expand_on(tape, xc, vars, path)?;
    let state = tape.mix(features, mask.clone(), vars.normalize)?;
    select_on(tape, xq, vars, state)
}

/// Eager polynomial expansion of `[batch, n, d]` tokens with `activation`
/// standing in for the parameters' own.
pub fn polynomial_expand<T: Scalar>(xc: &Tensor<T>, params: &PoMParams<T>, activation: Unary) -> Result<Tensor<T>> {
    polynomial_expand_path(xc, params, activation, ExpandPath::Fused)
}

pub fn polynomial_expand_path<T: Scalar>(
    xc: &Tensor<T>,
    params: &PoMParams<T>,
    activation: Unary,
    path: ExpandPath,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut vars = params.bind_frozen(&mut tape);
    vars.activation = activation;
    let x = tape.constant(xc.clone());
    let out = polynomial_expand_on(&mut tape, x, &vars, path)?;
    Ok(tape.value(out).clone())
}

/// Eager selection against a `[batch, 1 or n, k*D]` state.
pub fn select<T: Scalar>(xq: &Tensor<T>, params: &PoMParams<T>, state: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let x = tape.constant(xq.clone());
    let s = tape.constant(state.clone());
    let out = select_on(&mut tape, x, &vars, s)?;
    Ok(tape.value(out).clone())
}

/// Eager mixer forward pass. `xc = None` mixes `xq` with itself.
pub fn pom_forward<T: Scalar>(
    xq: &Tensor<T>,
    xc: Option<&Tensor<T>>,
    params: &PoMParams<T>,
    mask: &MaskSpec,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let q = tape.constant(xq.clone());
    let c = xc.map(|c| tape.constant(c.clone()));
    let out = pom_forward_on(&mut tape, q, c, &vars, mask)?;
    let value = tape.value(out).clone();
    value.ensure_finite("pom_forward")?;
    Ok(value)
}
