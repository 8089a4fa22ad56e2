use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::ToyModel;

/// Linear noising path: data at `t = 0`, pure noise at `t = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlowPath;

impl FlowPath {
    pub fn alpha(self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn gamma(self, t: f64) -> f64 {
        t
    }

    /// `x_t = alpha(t) x0 + gamma(t) eps`, one time per row.
    pub fn interpolate(self, x0: &Tensor<f64>, eps: &Tensor<f64>, t: &[f64]) -> Result<Tensor<f64>> {
        let f = row_width(x0, t.len())?;
        if eps.shape() != x0.shape() {
            return Err(Error::shape("interpolate", x0.shape(), eps.shape()));
        }
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (x, e))| {
                let ti = t[i / f];
                self.alpha(ti) * x + self.gamma(ti) * e
            })
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }
}

fn row_width(x: &Tensor<f64>, rows: usize) -> Result<usize> {
    if x.rank() != 2 || x.dim(0) != rows {
        return Err(Error::invalid("flow path", format!("expected {rows} rows, got {:?}", x.shape())));
    }
    Ok(x.dim(1))
}

/// Training target family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Predict the noise `eps`.
    Diffusion,
    /// Predict the path velocity `eps - x0`.
    FlowMatching,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Diffusion => "diffusion",
            Objective::FlowMatching => "flow_matching",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Objective::Diffusion),
            "flow_matching" => Ok(Objective::FlowMatching),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected diffusion or flow_matching)"
            ))),
        }
    }
}

/// Anything that maps noisy samples, times and labels to a prediction of
/// the same shape as the samples.
pub trait Denoiser {
    fn predict(&self, x: &Tensor<f64>, t: &[f64], labels: &[usize]) -> Result<Tensor<f64>>;
}

impl Denoiser for ToyModel {
    fn predict(&self, x: &Tensor<f64>, t: &[f64], labels: &[usize]) -> Result<Tensor<f64>> {
        ToyModel::predict(self, x, t, labels)
    }
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor<f64>, &[f64], &[usize]) -> Result<Tensor<f64>>,
{
    fn predict(&self, x: &Tensor<f64>, t: &[f64], labels: &[usize]) -> Result<Tensor<f64>> {
        self(x, t, labels)
    }
}

/// One noised batch and its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub t: Vec<f64>,
    pub eps: Tensor<f64>,
    pub x_t: Tensor<f64>,
    pub target: Tensor<f64>,
}

/// Draw `t ~ U[0, 1]` per row and `eps ~ N(0, 1)`, then build `x_t` and
/// the target for `objective`.
pub fn training_pair(objective: Objective, x0: &Tensor<f64>, rng: &mut impl Rng) -> Result<TrainingPair> {
    if x0.rank() != 2 {
        return Err(Error::invalid("training pair", format!("expected [b, f] data, got {:?}", x0.shape())));
    }
    let t: Vec<f64> = (0..x0.dim(0)).map(|_| rng.random::<f64>()).collect();
    let eps = Tensor::randn(x0.shape().to_vec(), 1.0, rng);
    let x_t = FlowPath.interpolate(x0, &eps, &t)?;
    let target = match objective {
        Objective::Diffusion => eps.clone(),
        Objective::FlowMatching => eps.sub(x0)?,
    };
    Ok(TrainingPair { t, eps, x_t, target })
}

/// Squared error of `model` on a drawn pair, summed over features and
/// averaged over rows.
pub fn pair_loss(model: &impl Denoiser, pair: &TrainingPair, labels: &[usize]) -> Result<f64> {
    let pred = model.predict(&pair.x_t, &pair.t, labels)?;
    pred.ensure_finite("model output")?;
    let diff = pred.sub(&pair.target)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / pair.t.len() as f64)
}

/// `E ||eps - f(x_t, c, t)||^2`.
pub fn diffusion_loss(model: &impl Denoiser, x0: &Tensor<f64>, labels: &[usize], rng: &mut impl Rng) -> Result<f64> {
    let pair = training_pair(Objective::Diffusion, x0, rng)?;
    pair_loss(model, &pair, labels)
}

/// `E ||(eps - x0) - f(x_t, c, t)||^2`.
pub fn flow_matching_loss(
    model: &impl Denoiser,
    x0: &Tensor<f64>,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<f64> {
    let pair = training_pair(Objective::FlowMatching, x0, rng)?;
    pair_loss(model, &pair, labels)
}
