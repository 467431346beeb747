//! Fixtures shared by the benchmarks.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osuda_core::data::ImageBatch;

pub fn random_map(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn random_images(seed: u64, n: usize, size: usize) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch::new(Array4::from_shape_fn((n, 3, size, size), |_| rng.gen_range(0.0..1.0)), None).unwrap()
}
