//! Reverse-mode gradients against central finite differences.
//!
//! Each target module is evaluated on small random f64 inputs with the
//! scalar loss `sum(output * R)` for a fixed random `R`, and every element
//! of every parameter tensor is perturbed in turn.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    image_dip_block_on, video_dip_block_on, BlockConfig, ImageBlockParams, VideoBlockParams,
};
use crate::error::{Error, Result};
use crate::pom::{pom_forward_on, MaskSpec, PoMParams};
use crate::tensor::{Tape, Tensor, Var};

pub const GRADCHECK_TOL: f64 = 1e-4;
/// Central difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than
/// relatively, so entries that are zero up to round-off do not dominate.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Pom,
    ImageBlock,
    VideoBlock,
}

impl GradModule {
    pub const ALL: [GradModule; 3] = [GradModule::Pom, GradModule::ImageBlock, GradModule::VideoBlock];
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradModule::Pom => "pom",
            GradModule::ImageBlock => "image_block",
            GradModule::VideoBlock => "video_block",
        })
    }
}

impl FromStr for GradModule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pom" => Ok(GradModule::Pom),
            "image_block" => Ok(GradModule::ImageBlock),
            "video_block" => Ok(GradModule::VideoBlock),
            other => Err(Error::Config(format!(
                "unknown module {other:?} (expected pom, image_block or video_block)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub module: GradModule,
    /// Number of scalar parameters perturbed.
    pub checked: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst: String,
    pub passed: bool,
}

impl GradReport {
    pub fn summary(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!(
            "{verdict} {:<12} {:>6} params  max rel error {:.3e} at {} (tol {GRADCHECK_TOL:.0e})",
            self.module.to_string(),
            self.checked,
            self.max_rel_error,
            self.worst
        )
    }
}

/// A parameterised scalar function the checker can both differentiate and
/// re-evaluate after perturbing one parameter entry.
trait Target {
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)>;
    /// Build the loss; returns it with the parameter handles in
    /// `named_mut` order.
    fn loss_on(&self, tape: &mut Tape<f64>, trainable: bool) -> Result<(Var, Vec<Var>)>;
}

fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

struct PomTarget {
    params: PoMParams<f64>,
    xq: Tensor<f64>,
    xc: Tensor<f64>,
    mask: MaskSpec,
    weights: Tensor<f64>,
}

impl Target for PomTarget {
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        self.params.named_tensors_mut().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn loss_on(&self, tape: &mut Tape<f64>, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let vars = if trainable { self.params.bind(tape) } else { self.params.bind_frozen(tape) };
        let xq = tape.constant(self.xq.clone());
        let xc = tape.constant(self.xc.clone());
        let out = pom_forward_on(tape, xq, Some(xc), &vars, &self.mask)?;
        Ok((weighted_sum(tape, out, &self.weights)?, vars.vars()))
    }
}

struct ImageTarget {
    params: ImageBlockParams<f64>,
    x: Tensor<f64>,
    cond: Tensor<f64>,
    weights: Tensor<f64>,
}

impl Target for ImageTarget {
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        self.params.named_tensors_mut()
    }

    fn loss_on(&self, tape: &mut Tape<f64>, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let vars = self.params.bind(tape, trainable);
        let x = tape.constant(self.x.clone());
        let c = tape.constant(self.cond.clone());
        let out = image_dip_block_on(tape, x, c, &vars, &MaskSpec::None)?;
        Ok((weighted_sum(tape, out, &self.weights)?, vars.vars()))
    }
}

struct VideoTarget {
    params: VideoBlockParams<f64>,
    x: Tensor<f64>,
    t: Tensor<f64>,
    text: Tensor<f64>,
    text_mask: MaskSpec,
    temporal_mask: MaskSpec,
    weights: Tensor<f64>,
}

impl Target for VideoTarget {
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        self.params.named_tensors_mut()
    }

    fn loss_on(&self, tape: &mut Tape<f64>, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let vars = self.params.bind(tape, trainable);
        let x = tape.constant(self.x.clone());
        let t = tape.constant(self.t.clone());
        let c = tape.constant(self.text.clone());
        let out = video_dip_block_on(tape, x, t, c, &vars, &self.text_mask, &self.temporal_mask)?;
        Ok((weighted_sum(tape, out, &self.weights)?, vars.vars()))
    }
}

fn loss_value(target: &impl Target) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = target.loss_on(&mut tape, false)?;
    tape.value(loss).item()
}

fn set(target: &mut impl Target, param: usize, index: usize, value: f64) -> f64 {
    let mut named = target.named_mut();
    let t = &mut named[param].1;
    let mut data = t.data().to_vec();
    let old = data[index];
    data[index] = value;
    **t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
    old
}

fn check_target(module: GradModule, mut target: impl Target) -> Result<GradReport> {
    let mut tape = Tape::new();
    let (loss, vars) = target.loss_on(&mut tape, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get(*v).cloned()).collect::<Result<_>>()?;
    let names: Vec<String> = target.named_mut().into_iter().map(|(n, _)| n).collect();
    if names.len() != analytic.len() {
        return Err(Error::invalid("gradcheck", "parameter handles do not match names".to_string()));
    }

    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::from("-"), 0);
    for (p, name) in names.iter().enumerate() {
        for i in 0..analytic[p].len() {
            let base = set(&mut target, p, i, 0.0);
            set(&mut target, p, i, base + FD_STEP);
            let plus = loss_value(&target)?;
            set(&mut target, p, i, base - FD_STEP);
            let minus = loss_value(&target)?;
            set(&mut target, p, i, base);

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[p].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > worst || !err.is_finite() {
                worst = if err.is_finite() { err } else { f64::INFINITY };
                worst_at = format!("{name}[{i}]");
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        module,
        checked,
        max_rel_error: worst,
        worst: worst_at,
        passed: worst <= GRADCHECK_TOL,
    })
}

/// Random biases so every bias gradient is exercised away from zero.
fn jitter_biases(named: Vec<(String, &mut Tensor<f64>)>, rng: &mut ChaCha8Rng) {
    for (_, t) in named {
        if t.rank() == 1 {
            *t = Tensor::randn(t.shape().to_vec(), 0.1, rng);
        }
    }
}

pub fn gradcheck(module: GradModule, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, n, d) = (2, 4, 4);
    match module {
        GradModule::Pom => {
            let mut params = PoMParams::<f64>::init(d, 3, 1, true, 0.5, &mut rng)?;
            jitter_biases(params.named_tensors_mut().into_iter().map(|(k, t)| (k.to_string(), t)).collect(), &mut rng);
            let m = 5;
            let target = PomTarget {
                params,
                xq: Tensor::randn(vec![b, n, d], 1.0, &mut rng),
                xc: Tensor::randn(vec![b, m, d], 1.0, &mut rng),
                mask: MaskSpec::padding(b, m, &[1, 1, 0, 1, 1, 1, 1, 1, 1, 0])?,
                weights: Tensor::randn(vec![b, n, d], 1.0, &mut rng),
            };
            check_target(module, target)
        }
        GradModule::ImageBlock => {
            let cfg = BlockConfig::new(d, 2, 1, 2);
            let mut params = ImageBlockParams::<f64>::init_random(cfg, 0.4, &mut rng)?;
            jitter_biases(params.named_tensors_mut(), &mut rng);
            let target = ImageTarget {
                params,
                x: Tensor::randn(vec![b, n, d], 1.0, &mut rng),
                cond: Tensor::randn(vec![b, d], 1.0, &mut rng),
                weights: Tensor::randn(vec![b, n, d], 1.0, &mut rng),
            };
            check_target(module, target)
        }
        GradModule::VideoBlock => {
            let cfg = BlockConfig::new(d, 2, 1, 2);
            let mut params = VideoBlockParams::<f64>::init_random(cfg, 0.4, &mut rng)?;
            jitter_biases(params.named_tensors_mut(), &mut rng);
            let n_text = 3;
            let target = VideoTarget {
                params,
                x: Tensor::randn(vec![b, n, d], 1.0, &mut rng),
                t: Tensor::randn(vec![b, d], 1.0, &mut rng),
                text: Tensor::randn(vec![b, n_text, d], 1.0, &mut rng),
                text_mask: MaskSpec::padding(b, n_text, &[1, 1, 0, 1, 1, 1])?,
                temporal_mask: MaskSpec::block_causal(2)?,
                weights: Tensor::randn(vec![b, n, d], 1.0, &mut rng),
            };
            check_target(module, target)
        }
    }
}
