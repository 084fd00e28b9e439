//! Glorot-uniform weight initialization.

use rand::Rng;

use super::tensor::Tensor2;

/// Uniform in [-√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out))] with
/// fan_out = rows and fan_in = cols, sampled row-major so a given RNG state
/// always produces the same matrix.
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor2::from_vec(rows, cols, data)
}
