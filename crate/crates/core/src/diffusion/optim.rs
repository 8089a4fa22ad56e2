use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoupled weight decay Adam with global gradient norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub clip_norm: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64, clip_norm: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update `params` in place from `grads` (same order and shapes).
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [&mut Tensor<f64>], grads: &[&Tensor<f64>], lr: f64) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "adamw",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        for ((p, g), (m, _)) in params.iter().zip(grads).zip(&self.moments) {
            if p.shape() != g.shape() || m.len() != p.len() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                op: "gradient norm".into(),
            });
        }
        let clip = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            let mut data = std::mem::replace(*p, Tensor::scalar(0.0)).into_data();
            for i in 0..data.len() {
                let gi = g.data()[i] * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] -= lr * (update + self.weight_decay * data[i]);
            }
            **p = Tensor::new(g.shape().to_vec(), data)?;
        }
        Ok(norm)
    }
}

/// Constant learning rate, then a `1 - sqrt(progress)` cooldown over the
/// last `cooldown` fraction of `total` steps. `step` counts from 0.
pub fn learning_rate(base: f64, step: usize, total: usize, cooldown: f64) -> f64 {
    let cool_steps = (cooldown * total as f64).round() as usize;
    let start = total - cool_steps.min(total);
    if step < start || cool_steps == 0 {
        return base;
    }
    let progress = (step - start + 1) as f64 / cool_steps as f64;
    base * (1.0 - progress.min(1.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_flat_then_decays_to_zero() {
        assert_eq!(learning_rate(1e-3, 0, 100, 0.2), 1e-3);
        assert_eq!(learning_rate(1e-3, 79, 100, 0.2), 1e-3);
        let a = learning_rate(1e-3, 80, 100, 0.2);
        let b = learning_rate(1e-3, 90, 100, 0.2);
        assert!(a < 1e-3 && b < a);
        assert_eq!(learning_rate(1e-3, 99, 100, 0.2), 0.0);
        assert_eq!(learning_rate(1e-3, 99, 100, 0.0), 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = AdamW::new(0.0, 1e9);
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -3.0]).unwrap();
        opt.step(&mut [&mut p], &[&g], 0.1).unwrap();
        // With bias correction the first Adam step is lr * sign(g).
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_shrinks_with_zero_gradient() {
        let mut opt = AdamW::new(0.5, 1.0);
        let mut p = Tensor::full(vec![3], 2.0);
        opt.step(&mut [&mut p], &[&Tensor::zeros(vec![3])], 0.1).unwrap();
        assert!(p.data().iter().all(|v| (*v - 1.9).abs() < 1e-12));
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let mut opt = AdamW::new(0.0, 1.0);
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(opt.step(&mut [&mut p], &[&g], 0.01).unwrap(), 5.0);
    }
}
