use std::f64::consts::PI;

use super::params::Params;
use super::tensor::Scalar;
use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay on matrices (not biases or norms).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Params<T>,
    second: Params<T>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &ModelConfig, config: AdamConfig) -> Self {
        Self {
            config,
            first: Params::zeros(model),
            second: Params::zeros(model),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64, weight_decay: f64) {
        self.steps += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let grads = grads.named();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
            .zip(grads);
        for (((p, m), v), (_, g)) in tensors {
            let decay = if p.rank() == 2 { T::of(1.0 - lr * weight_decay) } else { T::one() };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] * decay - step_size * m.data[i] / denom;
            }
        }
    }
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`, flat at zero past `total`.
pub fn cosine_lr(initial: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return initial;
    }
    let frac = (step.min(total) as f64) / total as f64;
    initial * 0.5 * (1.0 + (PI * frac).cos())
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(grads: &Params<T>) -> f64 {
    grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Params<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 4,
            d_ffn: 4,
            heads: 2,
            ..ModelConfig::monolingual(6)
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.001, 0, 100), 0.001);
        assert!((cosine_lr(0.001, 50, 100) - 0.0005).abs() < 1e-15);
        assert!(cosine_lr(0.001, 100, 100).abs() < 1e-15);
        assert!(cosine_lr(0.001, 150, 100).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Params::<f64>::zeros(&cfg());
        g.embedding.data[0] = 3.0;
        g.embedding.data[1] = 4.0;
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut g, 2.0), grad_norm(&g));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut m = init_model::<f64>(&cfg(), 6, 0).unwrap();
        let before = m.params.clone();
        let mut g = Params::<f64>::zeros(&cfg());
        g.embedding.data[0] = 0.5;
        g.encoder[0].attn.query.bias.data[0] = -2.0;
        let mut adam = Adam::new(&cfg(), AdamConfig::default());
        adam.step(&mut m.params, &g, 0.01, 0.0);
        assert!((before.embedding.data[0] - m.params.embedding.data[0] - 0.01).abs() < 1e-8);
        assert!((m.params.encoder[0].attn.query.bias.data[0] - 0.01).abs() < 1e-8);
        assert_eq!(m.params.embedding.data[1], before.embedding.data[1]);
    }

    #[test]
    fn weight_decay_spares_vectors() {
        let mut m = init_model::<f64>(&cfg(), 6, 0).unwrap();
        let before = m.params.clone();
        let g = Params::<f64>::zeros(&cfg());
        let mut adam = Adam::new(&cfg(), AdamConfig::default());
        adam.step(&mut m.params, &g, 0.1, 0.5);
        assert!((m.params.embedding.data[0] - before.embedding.data[0] * 0.95).abs() < 1e-12);
        assert_eq!(m.params.encoder_norm.gain.data, before.encoder_norm.gain.data);
    }
}
