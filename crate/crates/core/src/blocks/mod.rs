//! Network blocks built on the Polynomial Mixer: the plain Polymorpher
//! residual block, the modulated image diffusion block and the video
//! block with an extra cross-mixer over text tokens.
//!
//! Modulation and gate heads start at zero, which makes every modulation
//! the identity and every gate factor `1 + g` equal to one. Residual
//! branches stay live from the first step.

mod layers;
mod pe;

use rand::Rng;

pub use layers::{
    broadcast_tokens, gated_residual, gated_residual_on, modulation, modulation_on, ConditionHead, ConditionHeadVars,
    FeedForward, FeedForwardVars, LinearParams, LinearVars, LN_EPS,
};
pub(crate) use layers::leaf as leaf_tensor;
pub use pe::{grid_positions, sinusoidal_pe};

use crate::error::{Error, Result};
use crate::pom::{pom_forward_on, MaskSpec, PoMParams, PoMVars};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Default standard deviation of freshly initialized weights.
pub const INIT_STD: f64 = 0.02;

/// Shape hyperparameters shared by all block variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    pub degree: usize,
    pub expand: usize,
    pub ffw_expand: usize,
}

impl BlockConfig {
    pub fn new(dim: usize, degree: usize, expand: usize, ffw_expand: usize) -> Self {
        BlockConfig {
            dim,
            degree,
            expand,
            ffw_expand,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.degree == 0 || self.expand == 0 || self.ffw_expand == 0 {
            return Err(Error::Config(format!("block dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn push_pom<'a, T: Scalar>(prefix: &str, p: &'a PoMParams<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
    for (name, t) in p.named_tensors() {
        out.push((format!("{prefix}.{name}"), t));
    }
}

fn push_pom_mut<'a, T: Scalar>(prefix: &str, p: &'a mut PoMParams<T>, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
    for (name, t) in p.named_tensors_mut() {
        out.push((format!("{prefix}.{name}"), t));
    }
}

fn bind_pom<T: Scalar>(p: &PoMParams<T>, tape: &mut Tape<T>, trainable: bool) -> PoMVars {
    if trainable {
        p.bind(tape)
    } else {
        p.bind_frozen(tape)
    }
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.layer_norm(x, LN_EPS)
}

/// `P(X) = X + PoM(X) + FF(X + PoM(X))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolymorpherParams<T: Scalar = f64> {
    pub pom: PoMParams<T>,
    pub ffw: FeedForward<T>,
}

#[derive(Clone, Debug)]
pub struct PolymorpherVars {
    pub pom: PoMVars,
    pub ffw: FeedForwardVars,
}

impl<T: Scalar> PolymorpherParams<T> {
    pub fn init(cfg: BlockConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(PolymorpherParams {
            pom: PoMParams::init(cfg.dim, cfg.degree, cfg.expand, true, std, rng)?,
            ffw: FeedForward::init(cfg.dim, cfg.ffw_expand, std, rng),
        })
    }

    pub fn zeros(cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PolymorpherParams {
            pom: PoMParams::zeros(cfg.dim, cfg.degree, cfg.expand, true)?,
            ffw: FeedForward::zeros(cfg.dim, cfg.ffw_expand),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        push_pom("pom", &self.pom, &mut v);
        self.ffw.push_named("ffw", &mut v);
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        push_pom_mut("pom", &mut self.pom, &mut v);
        self.ffw.push_named_mut("ffw", &mut v);
        v
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> PolymorpherVars {
        PolymorpherVars {
            pom: bind_pom(&self.pom, tape, trainable),
            ffw: self.ffw.bind(tape, trainable),
        }
    }
}

impl PolymorpherVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.pom.vars();
        v.extend(self.ffw.vars());
        v
    }
}

pub fn polymorpher_block_on<T: Scalar>(tape: &mut Tape<T>, x: Var, vars: &PolymorpherVars, mask: &MaskSpec) -> Result<Var> {
    let mixed = pom_forward_on(tape, x, None, &vars.pom, mask)?;
    let y = tape.add(x, mixed)?;
    let f = vars.ffw.apply(tape, y)?;
    tape.add(y, f)
}

pub fn polymorpher_block<T: Scalar>(x: &Tensor<T>, params: &PolymorpherParams<T>, mask: &MaskSpec) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(x.clone());
    let y = polymorpher_block_on(&mut tape, x, &vars, mask)?;
    Ok(tape.value(y).clone())
}

/// Image diffusion block: modulated mixer and feed-forward branches,
/// each followed by a gated residual. `cond` yields four modulation
/// vectors (`s1, b1, s2, b2`) and `gate` two gates (`g1, g2`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBlockParams<T: Scalar = f64> {
    pub pom: PoMParams<T>,
    pub ffw: FeedForward<T>,
    pub cond: ConditionHead<T>,
    pub gate: ConditionHead<T>,
}

#[derive(Clone, Debug)]
pub struct ImageBlockVars {
    pub pom: PoMVars,
    pub ffw: FeedForwardVars,
    pub cond: ConditionHeadVars,
    pub gate: ConditionHeadVars,
}

impl<T: Scalar> ImageBlockParams<T> {
    /// Gaussian weights with zero modulation and gate heads.
    pub fn init(cfg: BlockConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(ImageBlockParams {
            pom: PoMParams::init(cfg.dim, cfg.degree, cfg.expand, true, std, rng)?,
            ffw: FeedForward::init(cfg.dim, cfg.ffw_expand, std, rng),
            cond: ConditionHead::zeros(cfg.dim, 4),
            gate: ConditionHead::zeros(cfg.dim, 2),
        })
    }

    /// Gaussian weights everywhere, heads included.
    pub fn init_random(cfg: BlockConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::init(cfg, std, rng)?;
        p.cond = ConditionHead::init(cfg.dim, 4, std, rng);
        p.gate = ConditionHead::init(cfg.dim, 2, std, rng);
        Ok(p)
    }

    pub fn zeros(cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ImageBlockParams {
            pom: PoMParams::zeros(cfg.dim, cfg.degree, cfg.expand, true)?,
            ffw: FeedForward::zeros(cfg.dim, cfg.ffw_expand),
            cond: ConditionHead::zeros(cfg.dim, 4),
            gate: ConditionHead::zeros(cfg.dim, 2),
        })
    }

    pub fn dim(&self) -> usize {
        self.pom.dim
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        push_pom("pom", &self.pom, &mut v);
        self.ffw.push_named("ffw", &mut v);
        self.cond.linear.push_named("cond", &mut v);
        self.gate.linear.push_named("gate", &mut v);
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        push_pom_mut("pom", &mut self.pom, &mut v);
        self.ffw.push_named_mut("ffw", &mut v);
        self.cond.linear.push_named_mut("cond", &mut v);
        self.gate.linear.push_named_mut("gate", &mut v);
        v
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ImageBlockVars {
        ImageBlockVars {
            pom: bind_pom(&self.pom, tape, trainable),
            ffw: self.ffw.bind(tape, trainable),
            cond: self.cond.bind(tape, trainable),
            gate: self.gate.bind(tape, trainable),
        }
    }
}

impl ImageBlockVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.pom.vars();
        v.extend(self.ffw.vars());
        v.extend(self.cond.linear.vars());
        v.extend(self.gate.linear.vars());
        v
    }
}

/// `x: [batch, n, d]`, `cond: [batch, d]` (class plus time embedding).
pub fn image_dip_block_on<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cond: Var,
    vars: &ImageBlockVars,
    mask: &MaskSpec,
) -> Result<Var> {
    let m = vars.cond.apply(tape, cond)?;
    let g = vars.gate.apply(tape, cond)?;
    let (s1, b1, s2, b2) = (m[0], m[1], m[2], m[3]);
    let (g1, g2) = (g[0], g[1]);

    let x_ln = layer_norm(tape, x)?;
    let x_ln = modulation_on(tape, x_ln, s1, b1)?;
    let mixed = pom_forward_on(tape, x_ln, None, &vars.pom, mask)?;
    let x = gated_residual_on(tape, x, mixed, g1)?;

    let x_ln = layer_norm(tape, x)?;
    let x_ln = modulation_on(tape, x_ln, s2, b2)?;
    let f = vars.ffw.apply(tape, x_ln)?;
    gated_residual_on(tape, x, f, g2)
}

pub fn image_dip_block<T: Scalar>(x: &Tensor<T>, cond: &Tensor<T>, params: &ImageBlockParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(x.clone());
    let c = tape.constant(cond.clone());
    let y = image_dip_block_on(&mut tape, x, c, &vars, &MaskSpec::None)?;
    Ok(tape.value(y).clone())
}

/// Video block: a cross-mixer reading text tokens, a self-mixer under a
/// temporal mask, then the feed-forward branch. `cond` yields eight
/// modulation vectors and `gate` three gates.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBlockParams<T: Scalar = f64> {
    pub pom: PoMParams<T>,
    pub c_pom: PoMParams<T>,
    pub ffw: FeedForward<T>,
    pub cond: ConditionHead<T>,
    pub gate: ConditionHead<T>,
}

#[derive(Clone, Debug)]
pub struct VideoBlockVars {
    pub pom: PoMVars,
    pub c_pom: PoMVars,
    pub ffw: FeedForwardVars,
    pub cond: ConditionHeadVars,
    pub gate: ConditionHeadVars,
}

impl<T: Scalar> VideoBlockParams<T> {
    pub fn init(cfg: BlockConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(VideoBlockParams {
            pom: PoMParams::init(cfg.dim, cfg.degree, cfg.expand, true, std, rng)?,
            c_pom: PoMParams::init(cfg.dim, cfg.degree, cfg.expand, true, std, rng)?,
            ffw: FeedForward::init(cfg.dim, cfg.ffw_expand, std, rng),
            cond: ConditionHead::zeros(cfg.dim, 8),
            gate: ConditionHead::zeros(cfg.dim, 3),
        })
    }

    pub fn init_random(cfg: BlockConfig, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::init(cfg, std, rng)?;
        p.cond = ConditionHead::init(cfg.dim, 8, std, rng);
        p.gate = ConditionHead::init(cfg.dim, 3, std, rng);
        Ok(p)
    }

    pub fn zeros(cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(VideoBlockParams {
            pom: PoMParams::zeros(cfg.dim, cfg.degree, cfg.expand, true)?,
            c_pom: PoMParams::zeros(cfg.dim, cfg.degree, cfg.expand, true)?,
            ffw: FeedForward::zeros(cfg.dim, cfg.ffw_expand),
            cond: ConditionHead::zeros(cfg.dim, 8),
            gate: ConditionHead::zeros(cfg.dim, 3),
        })
    }

    pub fn dim(&self) -> usize {
        self.pom.dim
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        push_pom("pom", &self.pom, &mut v);
        push_pom("c_pom", &self.c_pom, &mut v);
        self.ffw.push_named("ffw", &mut v);
        self.cond.linear.push_named("cond", &mut v);
        self.gate.linear.push_named("gate", &mut v);
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        push_pom_mut("pom", &mut self.pom, &mut v);
        push_pom_mut("c_pom", &mut self.c_pom, &mut v);
        self.ffw.push_named_mut("ffw", &mut v);
        self.cond.linear.push_named_mut("cond", &mut v);
        self.gate.linear.push_named_mut("gate", &mut v);
        v
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> VideoBlockVars {
        VideoBlockVars {
            pom: bind_pom(&self.pom, tape, trainable),
            c_pom: bind_pom(&self.c_pom, tape, trainable),
            ffw: self.ffw.bind(tape, trainable),
            cond: self.cond.bind(tape, trainable),
            gate: self.gate.bind(tape, trainable),
        }
    }
}

impl VideoBlockVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.pom.vars();
        v.extend(self.c_pom.vars());
        v.extend(self.ffw.vars());
        v.extend(self.cond.linear.vars());
        v.extend(self.gate.linear.vars());
        v
    }
}

/// `x: [batch, n, d]` video tokens, `t: [batch, d]` time embedding,
/// `text: [batch, n_text, d]` text tokens. `text_mask` selects visible
/// text tokens; `temporal_mask` must be `None`, `Causal` or `BlockCausal`.
#[allow(clippy::too_many_arguments)]
pub fn video_dip_block_on<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    t: Var,
    text: Var,
    vars: &VideoBlockVars,
    text_mask: &MaskSpec,
    temporal_mask: &MaskSpec,
) -> Result<Var> {
    if !matches!(temporal_mask, MaskSpec::None | MaskSpec::Causal | MaskSpec::BlockCausal(_)) {
        return Err(Error::Mask(format!(
            "temporal mask must be none, causal or block causal, got {temporal_mask:?}"
        )));
    }
    let m = vars.cond.apply(tape, t)?;
    let g = vars.gate.apply(tape, t)?;
    let (sx, bx, sc, bc, s1, b1, s2, b2) = (m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7]);
    let (gc, g1, g2) = (g[0], g[1], g[2]);

    let x_ln = layer_norm(tape, x)?;
    let x_ln = modulation_on(tape, x_ln, sx, bx)?;
    let c_ln = layer_norm(tape, text)?;
    let c_ln = modulation_on(tape, c_ln, sc, bc)?;
    let cross = pom_forward_on(tape, x_ln, Some(c_ln), &vars.c_pom, text_mask)?;
    let x = gated_residual_on(tape, x, cross, gc)?;

    let x_ln = layer_norm(tape, x)?;
    let x_ln = modulation_on(tape, x_ln, s1, b1)?;
    let mixed = pom_forward_on(tape, x_ln, None, &vars.pom, temporal_mask)?;
    let x = gated_residual_on(tape, x, mixed, g1)?;

    let x_ln = layer_norm(tape, x)?;
    let x_ln = modulation_on(tape, x_ln, s2, b2)?;
    let f = vars.ffw.apply(tape, x_ln)?;
    gated_residual_on(tape, x, f, g2)
}

pub fn video_dip_block<T: Scalar>(
    x: &Tensor<T>,
    t: &Tensor<T>,
    text: &Tensor<T>,
    text_mask: &MaskSpec,
    temporal_mask: &MaskSpec,
    params: &VideoBlockParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.constant(x.clone());
    let t = tape.constant(t.clone());
    let c = tape.constant(text.clone());
    let y = video_dip_block_on(&mut tape, x, t, c, &vars, text_mask, temporal_mask)?;
    Ok(tape.value(y).clone())
}

/// Any of the three block variants.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockParams<T: Scalar = f64> {
    Polymorpher(PolymorpherParams<T>),
    ImageDiP(ImageBlockParams<T>),
    VideoDiP(VideoBlockParams<T>),
}

impl<T: Scalar> BlockParams<T> {
    pub fn variant(&self) -> &'static str {
        match self {
            BlockParams::Polymorpher(_) => "polymorpher",
            BlockParams::ImageDiP(_) => "image_dip",
            BlockParams::VideoDiP(_) => "video_dip",
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            BlockParams::Polymorpher(p) => p.named_tensors(),
            BlockParams::ImageDiP(p) => p.named_tensors(),
            BlockParams::VideoDiP(p) => p.named_tensors(),
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            BlockParams::Polymorpher(p) => p.named_tensors_mut(),
            BlockParams::ImageDiP(p) => p.named_tensors_mut(),
            BlockParams::VideoDiP(p) => p.named_tensors_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BlockConfig {
        BlockConfig::new(4, 2, 1, 2)
    }

    #[test]
    fn zero_blocks_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(vec![2, 5, 4], 1.0, &mut rng);
        let c = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let text = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);

        let p = PolymorpherParams::zeros(cfg()).unwrap();
        assert_eq!(polymorpher_block(&x, &p, &MaskSpec::None).unwrap(), x);
        let p = ImageBlockParams::zeros(cfg()).unwrap();
        assert_eq!(image_dip_block(&x, &c, &p).unwrap(), x);
        let p = VideoBlockParams::zeros(cfg()).unwrap();
        let y = video_dip_block(&x, &c, &text, &MaskSpec::None, &MaskSpec::BlockCausal(2), &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fresh_image_block_keeps_residual_branch_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ImageBlockParams::<f64>::init(cfg(), 0.5, &mut rng).unwrap();
        let x = Tensor::randn(vec![1, 3, 4], 1.0, &mut rng);
        let c = Tensor::randn(vec![1, 4], 1.0, &mut rng);
        let y = image_dip_block(&x, &c, &p).unwrap();
        assert_ne!(y, x);
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn head_widths_follow_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ImageBlockParams::<f64>::init(cfg(), 0.02, &mut rng).unwrap();
        assert_eq!(img.cond.linear.output_dim(), 16);
        assert_eq!(img.gate.linear.output_dim(), 8);
        let vid = VideoBlockParams::<f64>::init(cfg(), 0.02, &mut rng).unwrap();
        assert_eq!(vid.cond.linear.output_dim(), 32);
        assert_eq!(vid.gate.linear.output_dim(), 12);
    }

    #[test]
    fn bound_vars_follow_named_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = VideoBlockParams::<f64>::init_random(cfg(), 0.1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, true);
        let named = p.named_tensors();
        let handles = vars.vars();
        assert_eq!(named.len(), handles.len());
        for ((_, t), v) in named.iter().zip(handles) {
            assert_eq!(*t, tape.value(v));
        }
    }

    #[test]
    fn rejects_padding_as_temporal_mask() {
        let p = VideoBlockParams::<f64>::zeros(cfg()).unwrap();
        let x = Tensor::zeros(vec![1, 2, 4]);
        let t = Tensor::zeros(vec![1, 4]);
        let mask = MaskSpec::padding(1, 2, &[1, 1]).unwrap();
        assert!(video_dip_block(&x, &t, &x, &MaskSpec::None, &mask, &p).is_err());
    }
}
