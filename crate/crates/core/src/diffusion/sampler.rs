use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::objective::{Denoiser, FlowPath, Objective};

/// DDIM starts just below `t = 1`, where the data coefficient of the
/// linear path vanishes and the data estimate is undefined.
pub const DDIM_T_MAX: f64 = 1.0 - 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMethod {
    Euler,
    Heun,
    Ddim,
}

impl SamplerMethod {
    /// Objective the sampler's update rule assumes.
    pub fn objective(self) -> Objective {
        match self {
            SamplerMethod::Euler | SamplerMethod::Heun => Objective::FlowMatching,
            SamplerMethod::Ddim => Objective::Diffusion,
        }
    }
}

impl fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMethod::Euler => "euler",
            SamplerMethod::Heun => "heun",
            SamplerMethod::Ddim => "ddim",
        })
    }
}

impl FromStr for SamplerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SamplerMethod::Euler),
            "heun" => Ok(SamplerMethod::Heun),
            "ddim" => Ok(SamplerMethod::Ddim),
            other => Err(Error::Config(format!("unknown sampler {other:?} (expected euler, heun or ddim)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub method: SamplerMethod,
    /// Guidance weight `w` in `uncond + w (cond - uncond)`.
    pub cfg_weight: f64,
}

/// Prediction with classifier-free guidance. Without labels, or with a
/// zero weight, this is exactly the unconditional prediction; a weight of
/// one is exactly the conditional one.
pub fn guided_prediction(
    model: &impl Denoiser,
    x: &Tensor<f64>,
    t: &[f64],
    labels: Option<&[usize]>,
    null_class: usize,
    weight: f64,
) -> Result<Tensor<f64>> {
    let null = vec![null_class; x.dim(0)];
    let labels = match labels {
        Some(l) if weight != 0.0 => l,
        _ => return model.predict(x, t, &null),
    };
    let cond = model.predict(x, t, labels)?;
    if weight == 1.0 {
        return Ok(cond);
    }
    let uncond = model.predict(x, t, &null)?;
    combine_guidance(&uncond, &cond, weight)
}

/// `uncond + w (cond - uncond)`.
pub fn combine_guidance(uncond: &Tensor<f64>, cond: &Tensor<f64>, weight: f64) -> Result<Tensor<f64>> {
    uncond.add(&cond.sub(uncond)?.scale(weight))
}

/// Integrate from `noise` at `t = 1` down to `t = 0`.
///
/// `trained_with` is the objective the model was fit to; it must match
/// the method (velocity for Euler and Heun, noise for DDIM).
pub fn sample(
    model: &impl Denoiser,
    trained_with: Objective,
    noise: &Tensor<f64>,
    labels: Option<&[usize]>,
    null_class: usize,
    cfg: &SampleConfig,
) -> Result<Tensor<f64>> {
    if cfg.method.objective() != trained_with {
        return Err(Error::Config(format!(
            "sampler {} needs a {} model, got one trained with {trained_with}",
            cfg.method,
            cfg.method.objective()
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    if noise.rank() != 2 {
        return Err(Error::invalid("sample", format!("expected [b, f] noise, got {:?}", noise.shape())));
    }
    if let Some(l) = labels {
        if l.len() != noise.dim(0) {
            return Err(Error::invalid("sample", format!("{} labels for {} samples", l.len(), noise.dim(0))));
        }
    }
    let b = noise.dim(0);
    let t_max = if cfg.method == SamplerMethod::Ddim { DDIM_T_MAX } else { 1.0 };
    let grid: Vec<f64> = (0..=cfg.steps)
        .map(|i| t_max * (1.0 - i as f64 / cfg.steps as f64))
        .collect();
    let predict = |x: &Tensor<f64>, t: f64| guided_prediction(model, x, &vec![t; b], labels, null_class, cfg.cfg_weight);

    let mut x = noise.clone();
    for w in grid.windows(2) {
        let (t, s) = (w[0], w[1]);
        let dt = s - t;
        x = match cfg.method {
            SamplerMethod::Euler => {
                let v = predict(&x, t)?;
                x.add(&v.scale(dt))?
            }
            SamplerMethod::Heun => {
                let v1 = predict(&x, t)?;
                let x_euler = x.add(&v1.scale(dt))?;
                let v2 = predict(&x_euler, s)?;
                x.add(&v1.add(&v2)?.scale(0.5).scale(dt))?
            }
            SamplerMethod::Ddim => {
                let eps = predict(&x, t)?;
                let (a_t, g_t) = (FlowPath.alpha(t), FlowPath.gamma(t));
                let (a_s, g_s) = (FlowPath.alpha(s), FlowPath.gamma(s));
                let x0 = x.sub(&eps.scale(g_t))?.scale(1.0 / a_t);
                x0.scale(a_s).add(&eps.scale(g_s))?
            }
        };
        x.ensure_finite(format!("sampler state at t = {s}"))?;
    }
    Ok(x)
}
