use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose from a base seed.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_tensor(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("shape matches")
}
