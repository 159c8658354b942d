//! Seeded weight initializers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Deterministic RNG used everywhere randomness enters the crate.
pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Glorot-uniform `[fan_in, fan_out]` weight matrix.
pub fn xavier(rng: &mut Rng64, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches length")
}

pub fn normal(rng: &mut Rng64, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches length")
}

pub fn uniform(rng: &mut Rng64, shape: &[usize], limit: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-limit..limit)).collect())
        .expect("shape matches length")
}
