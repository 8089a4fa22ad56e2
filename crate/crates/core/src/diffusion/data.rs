use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Synthetic class-conditional datasets standing in for real images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// Points in the plane drawn from one Gaussian per class, with the
    /// class means spread evenly on a circle.
    GaussianMixture2D,
    /// 8x8 single channel images, one procedural pattern per class.
    Patterns8x8,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::GaussianMixture2D => "gmm2d",
            DatasetKind::Patterns8x8 => "patterns8x8",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm2d" => Ok(DatasetKind::GaussianMixture2D),
            "patterns8x8" => Ok(DatasetKind::Patterns8x8),
            other => Err(Error::Config(format!("unknown dataset {other:?} (expected gmm2d or patterns8x8)"))),
        }
    }
}

/// Radius of the circle carrying the mixture means.
pub const GMM_RADIUS: f64 = 2.0;
/// Per-coordinate standard deviation of each mixture component.
pub const GMM_STD: f64 = 0.25;
/// Number of distinct pattern classes.
pub const PATTERN_CLASSES: usize = 4;
const PATTERN_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub kind: DatasetKind,
    pub classes: usize,
}

/// A batch of flattened samples `[n, features]` with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn new(kind: DatasetKind, classes: usize) -> Result<Self> {
        match kind {
            DatasetKind::GaussianMixture2D if classes == 0 => {
                Err(Error::Config("the mixture needs at least one component".into()))
            }
            DatasetKind::Patterns8x8 if classes == 0 || classes > PATTERN_CLASSES => Err(Error::Config(format!(
                "patterns8x8 has 1 to {PATTERN_CLASSES} classes, got {classes}"
            ))),
            _ => Ok(SyntheticDataset { kind, classes }),
        }
    }

    /// Image extents `(height, width)` of one sample.
    pub fn grid(&self) -> (usize, usize) {
        match self.kind {
            DatasetKind::GaussianMixture2D => (1, 2),
            DatasetKind::Patterns8x8 => (8, 8),
        }
    }

    pub fn features(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Draw `n` samples with uniformly random labels.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Batch {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.classes)).collect();
        self.sample_labels(&labels, rng)
    }

    /// Draw one sample for each requested label.
    pub fn sample_labels(&self, labels: &[usize], rng: &mut impl Rng) -> Batch {
        let f = self.features();
        let mut data = Vec::with_capacity(labels.len() * f);
        for &c in labels {
            assert!(c < self.classes, "label {c} out of range");
            match self.kind {
                DatasetKind::GaussianMixture2D => {
                    let (mx, my) = gmm_mean(c, self.classes);
                    let nx: f64 = StandardNormal.sample(rng);
                    let ny: f64 = StandardNormal.sample(rng);
                    data.push(mx + GMM_STD * nx);
                    data.push(my + GMM_STD * ny);
                }
                DatasetKind::Patterns8x8 => data.extend(pattern(c, rng)),
            }
        }
        Batch {
            x: Tensor::new(vec![labels.len(), f], data).expect("non-empty batch"),
            labels: labels.to_vec(),
        }
    }
}

/// Mean of mixture component `c` out of `classes`.
pub fn gmm_mean(c: usize, classes: usize) -> (f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
    (GMM_RADIUS * angle.cos(), GMM_RADIUS * angle.sin())
}

/// Pattern of class `c` with a random phase, amplitude and pixel noise.
fn pattern(c: usize, rng: &mut impl Rng) -> Vec<f64> {
    let amp = rng.random_range(0.6..1.0);
    let phase = rng.random_range(0..2usize);
    let mut out = Vec::with_capacity(64);
    for i in 0..8 {
        for j in 0..8 {
            let on = match c {
                0 => (i + phase) % 2 == 0,
                1 => (j + phase) % 2 == 0,
                2 => (i + j + phase) % 2 == 0,
                _ => {
                    let (ci, cj) = (i.abs_diff(3 + phase), j.abs_diff(3 + phase));
                    ci.max(cj) <= 2
                }
            };
            let noise: f64 = StandardNormal.sample(rng);
            out.push(if on { amp } else { -amp } + PATTERN_NOISE * noise);
        }
    }
    out
}
