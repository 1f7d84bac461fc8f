//! Fixtures shared by the criterion benches.

use ctp4d_core::{AxisRole, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded tensor with entries uniform in [-1, 1).
pub fn fixture(dims: &[usize], roles: Vec<AxisRole>, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(dims.to_vec(), roles, data).expect("fixture extents match buffer")
}
