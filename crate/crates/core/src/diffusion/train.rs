use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

use super::checkpoint::Checkpoint;
use super::data::{DatasetKind, SyntheticDataset};
use super::eval::{evaluate_samples, EvalReport};
use super::model::{patchify, ModelConfig, ToyModel};
use super::objective::{training_pair, Objective};
use super::optim::{learning_rate, AdamW};
use super::sampler::{sample, SampleConfig, SamplerMethod};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const METRICS_HEADER: &str = "step,loss,lr,wall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: Objective,
    pub lr: f64,
    pub steps: usize,
    /// Fraction of the run spent in the square-root cooldown.
    pub cooldown: f64,
    pub batch: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub classes: usize,
    pub depth: usize,
    pub dim: usize,
    pub degree: usize,
    pub expand: usize,
    pub ffw_expand: usize,
    pub patch: usize,
    /// Probability of replacing a label by the null class.
    pub cond_dropout: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: Objective::FlowMatching,
            lr: 1e-3,
            steps: 2000,
            cooldown: 0.1,
            batch: 128,
            seed: 0,
            dataset: DatasetKind::GaussianMixture2D,
            classes: 2,
            depth: 2,
            dim: 32,
            degree: 2,
            expand: 2,
            ffw_expand: 4,
            patch: 1,
            cond_dropout: 0.1,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// Read every recognised key, keeping defaults for absent ones, and
    /// reject anything left over.
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let c = Self::read(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// Consume the training keys from `kv`, leaving any others in place.
    pub fn read(kv: &mut KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        kv.take_into("loss", &mut c.loss)?;
        kv.take_into("lr", &mut c.lr)?;
        kv.take_into("steps", &mut c.steps)?;
        kv.take_into("cooldown", &mut c.cooldown)?;
        kv.take_into("batch", &mut c.batch)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.take_into("dataset", &mut c.dataset)?;
        kv.take_into("classes", &mut c.classes)?;
        kv.take_into("depth", &mut c.depth)?;
        kv.take_into("dim", &mut c.dim)?;
        kv.take_into("degree", &mut c.degree)?;
        kv.take_into("expand", &mut c.expand)?;
        kv.take_into("ffw_expand", &mut c.ffw_expand)?;
        kv.take_into("patch", &mut c.patch)?;
        kv.take_into("cond_dropout", &mut c.cond_dropout)?;
        kv.take_into("weight_decay", &mut c.weight_decay)?;
        kv.take_into("clip_norm", &mut c.clip_norm)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::load(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text, "<config>")?)
    }

    /// Canonical `key = value` text; [`parse`](Self::parse) reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("loss", &self.loss);
        line("lr", &self.lr);
        line("steps", &self.steps);
        line("cooldown", &self.cooldown);
        line("batch", &self.batch);
        line("seed", &self.seed);
        line("dataset", &self.dataset);
        line("classes", &self.classes);
        line("depth", &self.depth);
        line("dim", &self.dim);
        line("degree", &self.degree);
        line("expand", &self.expand);
        line("ffw_expand", &self.ffw_expand);
        line("patch", &self.patch);
        line("cond_dropout", &self.cond_dropout);
        line("weight_decay", &self.weight_decay);
        line("clip_norm", &self.clip_norm);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.cooldown) {
            return Err(Error::Config(format!("cooldown must lie in [0, 1), got {}", self.cooldown)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("cond_dropout must lie in [0, 1], got {}", self.cond_dropout)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("weight_decay must be >= 0 and clip_norm > 0".into()));
        }
        self.dataset()?;
        self.model()?.validate()?;
        self.model()?.block().validate()
    }

    pub fn dataset(&self) -> Result<SyntheticDataset> {
        SyntheticDataset::new(self.dataset, self.classes)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let (height, width) = self.dataset()?.grid();
        Ok(ModelConfig {
            height,
            width,
            patch: self.patch,
            dim: self.dim,
            depth: self.depth,
            degree: self.degree,
            expand: self.expand,
            ffw_expand: self.ffw_expand,
            classes: self.classes,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    /// 1-based optimizer step.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl MetricRow {
    pub fn csv_row(&self) -> String {
        format!("{},{:.9},{:.9e},{:.3}", self.step, self.loss, self.lr, self.wall_ms)
    }
}

pub struct TrainOutcome {
    pub model: ToyModel,
    pub metrics: Vec<MetricRow>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::from_named(self.metrics.len() as u64, cfg.to_text(), &self.model.named_tensors())
    }
}

/// Fresh model for `cfg`, drawn from the start of the seeded stream.
pub fn init_model(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ToyModel> {
    ToyModel::init(cfg.model()?, rng)
}

/// Train from scratch. `on_step` sees every metrics row as it is produced.
pub fn train(cfg: &TrainConfig, mut on_step: impl FnMut(&MetricRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(cfg, &mut rng)?;
    let data = cfg.dataset()?;
    let mcfg = cfg.model()?;
    let null = mcfg.null_class();
    let scale = mcfg.features() as f64;
    let mut opt = AdamW::new(cfg.weight_decay, cfg.clip_norm);
    let mut metrics = Vec::with_capacity(cfg.steps);
    let start = Instant::now();

    for step in 0..cfg.steps {
        let batch = data.sample(cfg.batch, &mut rng);
        let labels: Vec<usize> = batch
            .labels
            .iter()
            .map(|&c| if rng.random::<f64>() < cfg.cond_dropout { null } else { c })
            .collect();
        let pair = training_pair(cfg.loss, &batch.x, &mut rng)?;

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let pred = model.forward_on(&mut tape, &vars, &pair.x_t, &pair.t, &labels)?;
        let target = tape.constant(patchify(&pair.target, &mcfg)?);
        let mse = tape.mse(pred, target)?;
        let loss_var = tape.scale(mse, scale)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step: step + 1, loss });
        }

        let grads = tape.backward(loss_var)?;
        let handles = vars.vars();
        let grad_refs = handles.iter().map(|v| grads.get(*v)).collect::<Result<Vec<&Tensor<f64>>>>()?;
        let lr = learning_rate(cfg.lr, step, cfg.steps, cfg.cooldown);
        {
            let mut params: Vec<&mut Tensor<f64>> = model.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(&mut params, &grad_refs, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step: step + 1, loss },
                other => other,
            })?;
        }
        let row = MetricRow {
            step: step + 1,
            loss,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome { model, metrics })
}

/// Rebuild the configuration and model stored in a checkpoint.
pub fn restore(ck: &Checkpoint) -> Result<(TrainConfig, ToyModel)> {
    let cfg = TrainConfig::parse(&ck.config)
        .map_err(|e| Error::Checkpoint(format!("config echo does not parse: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(&cfg, &mut rng)?;
    ck.restore_into(model.named_tensors_mut())?;
    model.refresh_positions()?;
    Ok((cfg, model))
}

/// Draw `labels.len()` samples (or `n` unconditional ones when `labels`
/// is `None`) from fresh seeded noise.
pub fn generate(
    model: &ToyModel,
    trained_with: Objective,
    labels: Option<&[usize]>,
    n: usize,
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<Tensor<f64>> {
    let rows = labels.map_or(n, <[usize]>::len);
    let noise = Tensor::randn(vec![rows, model.cfg.features()], 1.0, rng);
    if rows <= GENERATE_CHUNK {
        return sample(model, trained_with, &noise, labels, model.cfg.null_class(), cfg);
    }
    // Rows evolve independently; chunking only bounds the working set.
    let mut parts = Vec::with_capacity(rows.div_ceil(GENERATE_CHUNK));
    for start in (0..rows).step_by(GENERATE_CHUNK) {
        let len = GENERATE_CHUNK.min(rows - start);
        let chunk = noise.slice_axis(0, start, len)?;
        let l = labels.map(|l| &l[start..start + len]);
        parts.push(sample(model, trained_with, &chunk, l, model.cfg.null_class(), cfg)?);
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

const GENERATE_CHUNK: usize = 256;

/// How samples are drawn from a trained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSettings {
    pub samples: usize,
    pub steps: usize,
    /// Defaults to Heun for flow matching and DDIM for diffusion.
    pub method: Option<SamplerMethod>,
    pub cfg_weight: f64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings {
            samples: 512,
            steps: 50,
            method: None,
            cfg_weight: 1.0,
        }
    }
}

impl SampleSettings {
    pub fn read(kv: &mut KeyValues) -> Result<Self> {
        let mut s = SampleSettings::default();
        kv.take_into("samples", &mut s.samples)?;
        kv.take_into("sample_steps", &mut s.steps)?;
        if let Some(m) = kv.take::<SamplerMethod>("sampler")? {
            s.method = Some(m);
        }
        kv.take_into("cfg_weight", &mut s.cfg_weight)?;
        if s.samples == 0 || s.steps == 0 {
            return Err(Error::Config("samples and sample_steps must be positive".into()));
        }
        Ok(s)
    }

    pub fn sampler(&self, trained_with: Objective) -> SampleConfig {
        let method = self.method.unwrap_or(match trained_with {
            Objective::FlowMatching => SamplerMethod::Heun,
            Objective::Diffusion => SamplerMethod::Ddim,
        });
        SampleConfig {
            steps: self.steps,
            method,
            cfg_weight: self.cfg_weight,
        }
    }
}

/// Score a model against fresh data: `settings.samples` generated points
/// with class-balanced labels against as many held-out points drawn from
/// `seed`.
pub fn evaluate_model(model: &ToyModel, cfg: &TrainConfig, settings: &SampleSettings, seed: u64) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = cfg.dataset()?;
    let labels: Vec<usize> = (0..settings.samples).map(|i| i % cfg.classes).collect();
    let reference = data.sample_labels(&labels, &mut rng);
    let generated = generate(model, cfg.loss, Some(&labels), 0, &settings.sampler(cfg.loss), &mut rng)?;
    evaluate_samples(&generated, &reference.x, Some((&labels, &labels)))
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch: 8,
            dim: 8,
            depth: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_text_round_trips() {
        let cfg = TrainConfig {
            lr: 3.5e-4,
            cooldown: 0.25,
            dataset: DatasetKind::Patterns8x8,
            classes: 4,
            patch: 2,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig::parse("lr = 0\n").is_err());
        assert!(TrainConfig::parse("cooldown = 1.0\n").is_err());
        assert!(TrainConfig::parse("patch = 2\n").is_err());
        assert!(TrainConfig::parse("learning_rate = 1\n").is_err());
    }

    #[test]
    fn one_step_changes_parameters() {
        let cfg = TrainConfig { steps: 1, ..tiny() };
        let fresh = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let out = train(&cfg, |_| {}).unwrap();
        assert_ne!(fresh.head, out.model.head);
        assert_eq!(out.metrics.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&tiny(), |_| {}).unwrap();
        let b = train(&tiny(), |_| {}).unwrap();
        let strip = |m: &[MetricRow]| m.iter().map(|r| (r.step, r.loss.to_bits(), r.lr.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn huge_learning_rate_diverges_with_step() {
        let cfg = TrainConfig {
            lr: 1e12,
            clip_norm: 1e30,
            steps: 50,
            ..tiny()
        };
        match train(&cfg, |_| {}) {
            Err(Error::Diverged { step, .. }) => assert!(step > 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics.len())),
        }
    }

    #[test]
    fn checkpoint_restores_model() {
        let cfg = tiny();
        let out = train(&cfg, |_| {}).unwrap();
        let ck = Checkpoint::from_bytes(&out.checkpoint(&cfg).to_bytes()).unwrap();
        let (cfg2, model) = restore(&ck).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(model, out.model);
        assert_eq!(ck.step, 3);
    }
}
