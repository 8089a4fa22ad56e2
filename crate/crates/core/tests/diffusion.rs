mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pom_core::diffusion::train::{generate, init_model, restore};
use pom_core::diffusion::{
    diffusion_loss, energy_distance, flow_matching_loss, sample, train, Checkpoint, FlowPath, Objective,
    SampleConfig, SamplerMethod, TrainConfig,
};
use pom_core::{Result, Tensor};

/// Brute-force `sqrt(2 E|X-Y| - E|X-X'| - E|Y-Y'|)` over all pairs,
/// including each point with itself.
fn energy_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let f = a.dim(1);
    let rows = |t: &Tensor<f64>| -> Vec<Vec<f64>> { t.data().chunks(f).map(<[f64]>::to_vec).collect() };
    let (ra, rb) = (rows(a), rows(b));
    let mean_dist = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
        let mut total = 0.0;
        for p in x {
            for q in y {
                total += p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            }
        }
        total / (x.len() * y.len()) as f64
    };
    (2.0 * mean_dist(&ra, &rb) - mean_dist(&ra, &ra) - mean_dist(&rb, &rb)).max(0.0).sqrt()
}

#[test]
fn energy_distance_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let a = Tensor::<f64>::randn(vec![300, 2], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(vec![280, 2], 1.5, &mut rng);
    let got = energy_distance(&a, &b).unwrap();
    assert!((got - energy_oracle(&a, &b)).abs() <= 1e-10);
    assert!(got > 0.0);
    assert!(energy_distance(&a, &a).unwrap().abs() <= 1e-12);
}

/// For data at a fixed point `c`, the exact noise is recoverable from
/// `x_t` and `t`.
fn exact_noise(c: Vec<f64>) -> impl Fn(&Tensor<f64>, &[f64], &[usize]) -> Result<Tensor<f64>> {
    move |x: &Tensor<f64>, t: &[f64], _: &[usize]| {
        let f = c.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - FlowPath.alpha(t[i / f]) * c[i % f]) / FlowPath.gamma(t[i / f]))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

fn exact_velocity(c: Vec<f64>) -> impl Fn(&Tensor<f64>, &[f64], &[usize]) -> Result<Tensor<f64>> {
    let noise = exact_noise(c.clone());
    move |x: &Tensor<f64>, t: &[f64], l: &[usize]| {
        let eps = noise(x, t, l)?;
        let f = c.len();
        Tensor::new(x.shape().to_vec(), eps.data().iter().enumerate().map(|(i, e)| e - c[i % f]).collect())
    }
}

#[test]
fn oracle_predictors_have_zero_loss() {
    let c = vec![0.7, -1.3];
    let x0 = Tensor::new(vec![64, 2], c.repeat(64)).unwrap();
    let labels = vec![0; 64];
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    assert!(diffusion_loss(&exact_noise(c.clone()), &x0, &labels, &mut rng).unwrap() < 1e-18);
    assert!(flow_matching_loss(&exact_velocity(c), &x0, &labels, &mut rng).unwrap() < 1e-18);
}

#[test]
fn losses_are_deterministic_under_a_seed() {
    let cfg = TrainConfig {
        classes: 2,
        ..TrainConfig::default()
    };
    let model = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = Tensor::<f64>::randn(vec![32, 2], 1.0, &mut rng);
    let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
    for objective in [Objective::Diffusion, Objective::FlowMatching] {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            match objective {
                Objective::Diffusion => diffusion_loss(&model, &x0, &labels, &mut rng).unwrap(),
                Objective::FlowMatching => flow_matching_loss(&model, &x0, &labels, &mut rng).unwrap(),
            }
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}

#[test]
fn samplers_recover_a_point_mass() {
    let c = vec![1.5, -0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let noise = Tensor::<f64>::randn(vec![16, 2], 1.0, &mut rng);
    let target = c.repeat(16);
    for steps in [1, 10] {
        let euler = SampleConfig {
            steps,
            method: SamplerMethod::Euler,
            cfg_weight: 0.0,
        };
        let out = sample(&exact_velocity(c.clone()), Objective::FlowMatching, &noise, None, 0, &euler).unwrap();
        assert!(common::max_abs_diff(out.data(), &target) <= 1e-12, "euler, {steps} steps");

        let ddim = SampleConfig {
            method: SamplerMethod::Ddim,
            ..euler
        };
        let out = sample(&exact_noise(c.clone()), Objective::Diffusion, &noise, None, 0, &ddim).unwrap();
        assert!(common::max_abs_diff(out.data(), &target) <= 1e-9, "ddim, {steps} steps");
    }
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 30,
        batch: 16,
        classes: 2,
        dim: 8,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_guidance_is_the_unconditional_sampler() {
    let cfg = tiny_config(5);
    let out = train(&cfg, |_| {}).unwrap();
    let labels = vec![1usize; 12];
    let settings = |w: f64| SampleConfig {
        steps: 8,
        method: SamplerMethod::Heun,
        cfg_weight: w,
    };
    let guided = generate(&out.model, cfg.loss, Some(&labels), 0, &settings(0.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let plain = generate(&out.model, cfg.loss, None, 12, &settings(0.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(guided, plain);

    let conditional = generate(&out.model, cfg.loss, Some(&labels), 0, &settings(1.0), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(conditional.max_abs_diff(&plain).unwrap() > 0.0);
}

#[test]
fn checkpoint_file_round_trip_restores_predictions() {
    let cfg = tiny_config(6);
    let out = train(&cfg, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.pom");
    out.checkpoint(&cfg).save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.step, 30);
    assert_eq!(loaded, out.checkpoint(&cfg));
    let (cfg2, model) = restore(&loaded).unwrap();
    assert_eq!(cfg2, cfg);

    let x = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let t = [0.1, 0.4, 0.7, 0.95];
    let labels = [0, 1, 2, 0];
    assert_eq!(model.predict(&x, &t, &labels).unwrap(), out.model.predict(&x, &t, &labels).unwrap());
}

#[test]
fn training_runs_are_reproducible_and_seed_dependent() {
    let a = train(&tiny_config(7), |_| {}).unwrap();
    let b = train(&tiny_config(7), |_| {}).unwrap();
    let c = train(&tiny_config(8), |_| {}).unwrap();
    let losses = |o: &pom_core::diffusion::TrainOutcome| o.metrics.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_ne!(losses(&a), losses(&c));
    assert_eq!(a.checkpoint(&tiny_config(7)).to_bytes(), b.checkpoint(&tiny_config(7)).to_bytes());
}

#[test]
fn patterns_dataset_trains_with_patches() {
    let cfg = TrainConfig {
        dataset: "patterns8x8".parse().unwrap(),
        patch: 2,
        steps: 3,
        batch: 4,
        dim: 8,
        classes: 4,
        ..TrainConfig::default()
    };
    let out = train(&cfg, |_| {}).unwrap();
    assert_eq!(out.metrics.len(), 3);
    assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    let s = generate(
        &out.model,
        cfg.loss,
        Some(&[0, 1, 2, 3]),
        0,
        &SampleConfig {
            steps: 2,
            method: SamplerMethod::Euler,
            cfg_weight: 1.0,
        },
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(s.shape(), &[4, 64]);
}
