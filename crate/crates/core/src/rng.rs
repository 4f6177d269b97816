//! Seeded random streams. Every consumer derives its own ChaCha stream from
//! a `(seed, stream)` pair so that adding a draw in one place never shifts
//! the numbers seen by another.

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

pub fn uniform_index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
