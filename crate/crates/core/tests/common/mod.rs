//! Independent reference implementations for the integration tests.
//!
//! Everything here works on flat `Vec<f64>` buffers with explicit loops and
//! never calls into the library's kernels, so agreement is meaningful.

#![allow(dead_code)]

use pom_core::blocks::{ImageBlockParams, VideoBlockParams};
use pom_core::pom::PoMParams;
use pom_core::Tensor;

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// `[m, k] x [k, n]`, row-major, triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn gelu(x: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `y = W v + b` for one vector, `W` stored `[out, in]`.
pub fn affine(w: &Tensor<f64>, b: Option<&Tensor<f64>>, v: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.dim(0), w.dim(1));
    assert_eq!(inp, v.len());
    (0..out)
        .map(|r| {
            let mut s = b.map_or(0.0, |b| b.data()[r]);
            for c in 0..inp {
                s += w.data()[r * inp + c] * v[c];
            }
            s
        })
        .collect()
}

/// Row-wise layer norm without affine parameters.
pub fn layer_norm(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    v.iter().map(|x| (x - mean) / (var + eps).sqrt()).collect()
}

/// Expanded features of one token: gelu(W_poly x + b), then running
/// products over the `degree` chunks.
pub fn pom_features(p: &PoMParams<f64>, tok: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(&p.w_poly, p.b_poly.as_ref(), tok).into_iter().map(gelu).collect();
    let chunk = h.len() / p.degree;
    let mut out = h.clone();
    for m in 1..p.degree {
        for i in 0..chunk {
            out[m * chunk + i] = out[(m - 1) * chunk + i] * h[m * chunk + i];
        }
    }
    out
}

/// How a query row's visible context is averaged.
#[derive(Clone, Copy)]
pub enum Denominator {
    /// Divide by the visible count.
    Count,
    /// Divide by `1e-7 + count`.
    EpsCount,
}

/// PoM for one batch element. `visible(i, j)` says whether query `i` may
/// read context token `j`.
pub fn pom_ref(
    p: &PoMParams<f64>,
    xq: &[f64],
    xc: &[f64],
    visible: impl Fn(usize, usize) -> bool,
    denom: Denominator,
) -> Vec<f64> {
    let d = p.dim;
    let (m, n) = (xq.len() / d, xc.len() / d);
    let feats: Vec<Vec<f64>> = (0..n).map(|j| pom_features(p, &xc[j * d..(j + 1) * d])).collect();
    let width = feats.first().map_or(p.degree * p.expand * d, Vec::len);
    let mut out = Vec::with_capacity(m * d);
    for i in 0..m {
        let mut state = vec![0.0; width];
        let mut count = 0usize;
        for (j, f) in feats.iter().enumerate() {
            if visible(i, j) {
                count += 1;
                for (s, v) in state.iter_mut().zip(f) {
                    *s += v;
                }
            }
        }
        let div = match denom {
            Denominator::Count => count as f64,
            Denominator::EpsCount => 1e-7 + count as f64,
        };
        if count > 0 {
            state.iter_mut().for_each(|s| *s /= div);
        }
        let tok = &xq[i * d..(i + 1) * d];
        let gate: Vec<f64> = affine(&p.w_sel, p.b_sel.as_ref(), tok).into_iter().map(sigmoid).collect();
        let gated: Vec<f64> = gate.iter().zip(&state).map(|(g, s)| g * s).collect();
        out.extend(affine(&p.w_out, p.b_out.as_ref(), &gated));
    }
    out
}

/// Unmasked self-mixing PoM of one `[n, d]` sequence.
pub fn pom_self(p: &PoMParams<f64>, x: &[f64]) -> Vec<f64> {
    pom_ref(p, x, x, |_, _| true, Denominator::Count)
}

/// `x * (1 + scale) + bias`.
pub fn modulation(x: &[f64], scale: &[f64], bias: &[f64]) -> Vec<f64> {
    x.iter().zip(scale).zip(bias).map(|((x, s), b)| x * (1.0 + s) + b).collect()
}

fn cond_chunks(
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    c: &[f64],
    parts: usize,
) -> Vec<Vec<f64>> {
    let act: Vec<f64> = c.iter().map(|v| silu(*v)).collect();
    let y = affine(w, Some(b), &act);
    let d = y.len() / parts;
    y.chunks(d).map(<[f64]>::to_vec).collect()
}

fn ffw(fc1: (&Tensor<f64>, &Tensor<f64>), fc2: (&Tensor<f64>, &Tensor<f64>), v: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(fc1.0, Some(fc1.1), v).into_iter().map(gelu).collect();
    affine(fc2.0, Some(fc2.1), &h)
}

fn rows(x: &[f64], d: usize) -> Vec<Vec<f64>> {
    x.chunks(d).map(<[f64]>::to_vec).collect()
}

/// Straight-line image block for one sample: `x` is `[n, d]`, `c` is `[d]`.
pub fn image_block_ref(p: &ImageBlockParams<f64>, x: &[f64], c: &[f64]) -> Vec<f64> {
    let d = c.len();
    let m = cond_chunks(&p.cond.linear.w, &p.cond.linear.b, c, 4);
    let g = cond_chunks(&p.gate.linear.w, &p.gate.linear.b, c, 2);
    let (s1, b1, s2, b2) = (&m[0], &m[1], &m[2], &m[3]);
    let (g1, g2) = (&g[0], &g[1]);

    // pom
    let x_ln: Vec<f64> = rows(x, d).iter().flat_map(|r| modulation(&layer_norm(r, 1e-6), s1, b1)).collect();
    let mixed = pom_self(&p.pom, &x_ln);
    let x: Vec<f64> = x
        .iter()
        .zip(&mixed)
        .enumerate()
        .map(|(i, (x, f))| x + f * (1.0 + g1[i % d]))
        .collect();

    // ffw
    let mut out = Vec::with_capacity(x.len());
    for r in rows(&x, d) {
        let x_ln = modulation(&layer_norm(&r, 1e-6), s2, b2);
        let f = ffw((&p.ffw.fc1.w, &p.ffw.fc1.b), (&p.ffw.fc2.w, &p.ffw.fc2.b), &x_ln);
        out.extend(r.iter().zip(&f).zip(g2).map(|((x, f), g)| x + f * (1.0 + g)));
    }
    out
}

/// Straight-line video block for one sample. `x` is `[n, d]`, `t` is
/// `[d]`, `c` is `[n_text, d]`; `text_valid[j]` marks usable text tokens
/// and `temporal(i, j)` gives the self-mixing visibility.
pub fn video_block_ref(
    p: &VideoBlockParams<f64>,
    x: &[f64],
    t: &[f64],
    c: &[f64],
    text_valid: &[bool],
    temporal: Option<&dyn Fn(usize, usize) -> bool>,
) -> Vec<f64> {
    let d = t.len();
    let m = cond_chunks(&p.cond.linear.w, &p.cond.linear.b, t, 8);
    let g = cond_chunks(&p.gate.linear.w, &p.gate.linear.b, t, 3);
    let (sx, bx, sc, bc, s1, b1, s2, b2) = (&m[0], &m[1], &m[2], &m[3], &m[4], &m[5], &m[6], &m[7]);
    let (gc, g1, g2) = (&g[0], &g[1], &g[2]);
    let gate_add = |x: &[f64], f: &[f64], g: &[f64]| -> Vec<f64> {
        x.iter().zip(f).enumerate().map(|(i, (x, f))| x + f * (1.0 + g[i % d])).collect()
    };

    // ca
    let x_ln: Vec<f64> = rows(x, d).iter().flat_map(|r| modulation(&layer_norm(r, 1e-6), sx, bx)).collect();
    let c_ln: Vec<f64> = rows(c, d).iter().flat_map(|r| modulation(&layer_norm(r, 1e-6), sc, bc)).collect();
    let cross = pom_ref(&p.c_pom, &x_ln, &c_ln, |_, j| text_valid[j], Denominator::Count);
    let x = gate_add(x, &cross, gc);

    // sa
    let x_ln: Vec<f64> = rows(&x, d).iter().flat_map(|r| modulation(&layer_norm(r, 1e-6), s1, b1)).collect();
    let mixed = match temporal {
        None => pom_self(&p.pom, &x_ln),
        Some(vis) => pom_ref(&p.pom, &x_ln, &x_ln, vis, Denominator::EpsCount),
    };
    let x = gate_add(&x, &mixed, g1);

    // ffw
    let mut out = Vec::with_capacity(x.len());
    for r in rows(&x, d) {
        let x_ln = modulation(&layer_norm(&r, 1e-6), s2, b2);
        let f = ffw((&p.ffw.fc1.w, &p.ffw.fc1.b), (&p.ffw.fc2.w, &p.ffw.fc2.b), &x_ln);
        out.extend(r.iter().zip(&f).zip(g2).map(|((x, f), g)| x + f * (1.0 + g)));
    }
    out
}

/// 1-indexed block-causal visibility on 0-indexed positions.
pub fn block_causal(k: usize) -> impl Fn(usize, usize) -> bool {
    move |i, j| j < (i / k + 1) * k
}

/// Central difference of `f` at `x` along every coordinate.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Path of the built `pom` binary.
pub fn pom_bin() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_BIN_EXE_pom"))
}
