use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensorops::Tensor;

/// Fan-in uniform initialisation: `U(−s, s)` with `s = sqrt(1 / (C·k²))`.
pub fn fan_in_uniform(out_channels: usize, in_channels: usize, kernel: usize, seed: u64) -> Tensor {
    let s = (1.0 / (in_channels * kernel * kernel) as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| rng.random_range(-s..=s))
}

/// Derives a per-layer seed from a model seed and a layer tag.
pub fn layer_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h
}
