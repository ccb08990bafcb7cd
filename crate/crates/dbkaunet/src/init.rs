//! Seeded parameter initialization helpers.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

/// Standard normal via Box-Muller; avoids distribution-crate version drift.
pub fn randn(rng: &mut Prng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

pub fn normal_param(rng: &mut Prng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| std * randn(rng)).collect())
}

/// Kaiming-style fan-in scaled normal for convolution / linear weights.
pub fn kaiming_param(rng: &mut Prng, shape: &[usize], fan_in: usize) -> Tensor {
    normal_param(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![0.0; n])
}

pub fn const_param(shape: &[usize], v: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![v; n])
}
