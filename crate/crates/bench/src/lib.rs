//! Input builders shared by the benchmarks.

use csac::rng::rng_from;
use csac::tensor::Tensor;
use rand::Rng as _;

/// Tensor of the given shape filled with uniform values in [-1, 1).
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = rng_from(seed, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Random labels below `classes`.
pub fn random_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(seed, &[1]);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}
