//! Weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::Tensor;

/// He-normal initialization: `N(0, sqrt(2 / fan_in))`, quantized to f32
/// like all persisted parameter state.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * std) as f32 as f64
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches generated length")
}
