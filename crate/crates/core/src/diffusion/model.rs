use rand::Rng;

use crate::blocks::{
    grid_positions, image_dip_block_on, leaf_tensor, sinusoidal_pe, BlockConfig, ImageBlockParams, ImageBlockVars,
    LinearParams, LinearVars, INIT_STD, LN_EPS,
};
use crate::error::{Error, Result};
use crate::pom::MaskSpec;
use crate::tensor::{Tape, Tensor, Var};

/// Time values are scaled by this factor before the sinusoidal encoding.
pub const TIME_SCALE: f64 = 1000.0;

/// Architecture of the toy denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub degree: usize,
    pub expand: usize,
    pub ffw_expand: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch {} must divide the {}x{} grid",
                self.patch, self.height, self.width
            )));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("dim {} must be a positive multiple of 4", self.dim)));
        }
        if self.depth == 0 || self.classes == 0 {
            return Err(Error::Config("depth and classes must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch
    }

    pub fn features(&self) -> usize {
        self.height * self.width
    }

    /// Row index of the learned null class used for unconditional passes.
    pub fn null_class(&self) -> usize {
        self.classes
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig::new(self.dim, self.degree, self.expand, self.ffw_expand)
    }
}

/// Class-conditional denoiser: patch embedding plus a 2D positional
/// encoding, a stack of image blocks conditioned on class and time, and a
/// final normalized linear read-out.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub cfg: ModelConfig,
    pub patch_embed: LinearParams<f64>,
    /// `[classes + 1, dim]`; the last row is the null class.
    pub class_embed: Tensor<f64>,
    pub time_fc1: LinearParams<f64>,
    pub time_fc2: LinearParams<f64>,
    pub blocks: Vec<ImageBlockParams<f64>>,
    pub head: LinearParams<f64>,
    pos: Tensor<f64>,
}

pub struct ToyModelVars {
    pub patch_embed: LinearVars,
    pub class_embed: Var,
    pub time_fc1: LinearVars,
    pub time_fc2: LinearVars,
    pub blocks: Vec<ImageBlockVars>,
    pub head: LinearVars,
}

impl ToyModelVars {
    /// Handles in the order of [`ToyModel::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.patch_embed.vars().to_vec();
        v.push(self.class_embed);
        v.extend(self.time_fc1.vars());
        v.extend(self.time_fc2.vars());
        for b in &self.blocks {
            v.extend(b.vars());
        }
        v.extend(self.head.vars());
        v
    }
}

impl ToyModel {
    /// Gaussian weights with standard deviation 0.02, zero biases, zero
    /// modulation heads and a zero read-out, so the fresh model predicts 0.
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, pf) = (cfg.dim, cfg.patch_features());
        let patch_embed = LinearParams::init(pf, d, INIT_STD, rng);
        let class_embed = Tensor::randn(vec![cfg.classes + 1, d], INIT_STD, rng);
        let time_fc1 = LinearParams::init(d, d, INIT_STD, rng);
        let time_fc2 = LinearParams::init(d, d, INIT_STD, rng);
        let blocks = (0..cfg.depth)
            .map(|_| ImageBlockParams::init(cfg.block(), INIT_STD, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyModel {
            cfg,
            patch_embed,
            class_embed,
            time_fc1,
            time_fc2,
            blocks,
            head: LinearParams::zeros(d, pf),
            pos: positional_table(&cfg)?,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut v = Vec::new();
        self.patch_embed.push_named("patch_embed", &mut v);
        v.push(("class_embed".to_string(), &self.class_embed));
        self.time_fc1.push_named("time.fc1", &mut v);
        self.time_fc2.push_named("time.fc2", &mut v);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.named_tensors() {
                v.push((format!("blocks.{i}.{name}"), t));
            }
        }
        self.head.push_named("head", &mut v);
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
        let mut v = Vec::new();
        self.patch_embed.push_named_mut("patch_embed", &mut v);
        v.push(("class_embed".to_string(), &mut self.class_embed));
        self.time_fc1.push_named_mut("time.fc1", &mut v);
        self.time_fc2.push_named_mut("time.fc2", &mut v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.named_tensors_mut() {
                v.push((format!("blocks.{i}.{name}"), t));
            }
        }
        self.head.push_named_mut("head", &mut v);
        v
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Scalars in the mixer projections of every block.
    pub fn pom_params(&self) -> usize {
        self.blocks.iter().map(|b| b.pom.num_params()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<f64>, trainable: bool) -> ToyModelVars {
        ToyModelVars {
            patch_embed: self.patch_embed.bind(tape, trainable),
            class_embed: leaf_tensor(tape, &self.class_embed, trainable),
            time_fc1: self.time_fc1.bind(tape, trainable),
            time_fc2: self.time_fc2.bind(tape, trainable),
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            head: self.head.bind(tape, trainable),
        }
    }

    /// Predict from noisy flattened samples `x: [b, features]` at times
    /// `t` with labels (the null class selects the unconditional branch).
    /// The result is in token layout `[b, tokens, patch * patch]`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<f64>,
        vars: &ToyModelVars,
        x: &Tensor<f64>,
        t: &[f64],
        labels: &[usize],
    ) -> Result<Var> {
        let b = x.dim(0);
        if x.rank() != 2 || x.dim(1) != self.cfg.features() || t.len() != b || labels.len() != b {
            return Err(Error::invalid(
                "toy model",
                format!(
                    "expected [b, {}] inputs with b times and labels, got {:?}, {} times, {} labels",
                    self.cfg.features(),
                    x.shape(),
                    t.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c > self.cfg.null_class()) {
            return Err(Error::invalid("toy model", format!("label {bad} out of range")));
        }
        let tokens = tape.constant(patchify(x, &self.cfg)?);
        let h = vars.patch_embed.apply(tape, tokens)?;
        let pos = tape.constant(tile_batch(&self.pos, b));
        let mut h = tape.add(h, pos)?;

        let scaled: Vec<f64> = t.iter().map(|v| v * TIME_SCALE).collect();
        let t_feat = tape.constant(sinusoidal_pe(&scaled, self.cfg.dim, 1)?);
        let te = vars.time_fc1.apply(tape, t_feat)?;
        let te = tape.silu(te)?;
        let te = vars.time_fc2.apply(tape, te)?;
        let ce = tape.gather(vars.class_embed, labels.to_vec())?;
        let cond = tape.add(te, ce)?;

        for block in &vars.blocks {
            h = image_dip_block_on(tape, h, cond, block, &MaskSpec::None)?;
        }
        let h = tape.layer_norm(h, LN_EPS)?;
        vars.head.apply(tape, h)
    }

    /// Inference-only prediction, flattened back to `[b, features]`.
    pub fn predict(&self, x: &Tensor<f64>, t: &[f64], labels: &[usize]) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &vars, x, t, labels)?;
        let out = tape.value(out);
        out.ensure_finite("toy model output")?;
        unpatchify(out, &self.cfg)
    }

    pub(crate) fn refresh_positions(&mut self) -> Result<()> {
        self.pos = positional_table(&self.cfg)?;
        Ok(())
    }
}

fn positional_table(cfg: &ModelConfig) -> Result<Tensor<f64>> {
    let grid = grid_positions(&[cfg.height / cfg.patch, cfg.width / cfg.patch]);
    sinusoidal_pe(&grid, cfg.dim, 2)
}

fn tile_batch(t: &Tensor<f64>, b: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(b * t.len());
    for _ in 0..b {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![b];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, data).expect("tiled shape")
}

/// `[b, H*W]` row-major images to `[b, tokens, p*p]` patches, tokens in
/// row-major patch order and pixels row-major within a patch.
pub fn patchify(x: &Tensor<f64>, cfg: &ModelConfig) -> Result<Tensor<f64>> {
    let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
    if x.rank() != 2 || x.dim(1) != h * w {
        return Err(Error::invalid("patchify", format!("expected [b, {}], got {:?}", h * w, x.shape())));
    }
    let b = x.dim(0);
    let mut out = Vec::with_capacity(x.len());
    for img in x.data().chunks_exact(h * w) {
        for pi in 0..h / p {
            for pj in 0..w / p {
                for di in 0..p {
                    let row = (pi * p + di) * w + pj * p;
                    out.extend_from_slice(&img[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![b, cfg.tokens(), p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(x: &Tensor<f64>, cfg: &ModelConfig) -> Result<Tensor<f64>> {
    let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
    if x.rank() != 3 || x.dim(1) != cfg.tokens() || x.dim(2) != p * p {
        return Err(Error::invalid(
            "unpatchify",
            format!("expected [b, {}, {}], got {:?}", cfg.tokens(), p * p, x.shape()),
        ));
    }
    let b = x.dim(0);
    let mut out = vec![0.0; b * h * w];
    for (img, src) in out.chunks_exact_mut(h * w).zip(x.data().chunks_exact(h * w)) {
        let mut it = src.iter();
        for pi in 0..h / p {
            for pj in 0..w / p {
                for di in 0..p {
                    let row = (pi * p + di) * w + pj * p;
                    for v in &mut img[row..row + p] {
                        *v = *it.next().unwrap();
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, h * w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            height: 4,
            width: 4,
            patch: 2,
            dim: 8,
            depth: 2,
            degree: 2,
            expand: 1,
            ffw_expand: 2,
            classes: 3,
        }
    }

    #[test]
    fn patchify_round_trips_and_groups_pixels() {
        let x = Tensor::from_fn(vec![2, 16], |i| i as f64);
        let p = patchify(&x, &cfg()).unwrap();
        assert_eq!(p.shape(), &[2, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(unpatchify(&p, &cfg()).unwrap(), x);
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let m = ToyModel::init(cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::full(vec![3, 16], 0.3);
        let y = m.predict(&x, &[0.1, 0.5, 0.9], &[0, 1, 3]).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bound_order_matches_names() {
        let m = ToyModel::init(cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, true);
        let named = m.named_tensors();
        assert_eq!(named.len(), vars.vars().len());
        for ((_, t), v) in named.iter().zip(vars.vars()) {
            assert_eq!(*t, tape.value(v));
        }
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let m = ToyModel::init(cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = Tensor::zeros(vec![1, 16]);
        assert!(m.predict(&x, &[0.5], &[4]).is_err());
        assert!(m.predict(&Tensor::zeros(vec![1, 15]), &[0.5], &[0]).is_err());
        let bad = ModelConfig { patch: 3, ..cfg() };
        assert!(ToyModel::init(bad, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }
}
