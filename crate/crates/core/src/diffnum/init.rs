use rand::Rng as _;

use super::tape::Tensor;
use crate::{num, rng::Rng};

/// Uniform Glorot initialization in ±√(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let a = num::sqrt(6.0 / (rows + cols) as f64);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-a..=a))
}
