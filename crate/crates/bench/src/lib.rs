//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sasv_core::Tensor;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        [rows, cols],
        (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

/// `n` scores with roughly 10% targets drawn from shifted distributions.
pub fn random_trials(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let target = r.random_bool(0.1);
            let s = r.random_range(-1.0..1.0) + if target { 0.8 } else { 0.0 };
            (s, target)
        })
        .unzip()
}
