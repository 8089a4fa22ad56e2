//! Toy diffusion and flow-matching training on synthetic data.
//!
//! A small class-conditional denoiser built from image blocks is trained
//! on either a 2D Gaussian mixture or 8x8 procedural patterns. Noise is
//! added along the linear path `x_t = (1 - t) x0 + t eps`; models regress
//! either the noise or the velocity `eps - x0` and are sampled with DDIM,
//! Euler or Heun, optionally with classifier-free guidance.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod model;
pub mod objective;
pub mod optim;
pub mod sampler;
pub mod train;

pub use ablation::{ablation_csv, degree_ablation, AblationConfig, AblationRow};
pub use checkpoint::Checkpoint;
pub use data::{Batch, DatasetKind, SyntheticDataset};
pub use eval::{energy_distance, evaluate_samples, EvalReport};
pub use model::{ModelConfig, ToyModel};
pub use objective::{diffusion_loss, flow_matching_loss, Denoiser, FlowPath, Objective};
pub use optim::{learning_rate, AdamW};
pub use sampler::{sample, SampleConfig, SamplerMethod};
pub use train::{evaluate_model, generate, train, MetricRow, SampleSettings, TrainConfig, TrainOutcome};
