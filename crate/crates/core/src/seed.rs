//! Seed derivation helpers shared by the corpus, the scripted clients and the
//! benchmark runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds several integers into one well-mixed seed. Order matters.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

/// Uniform draw in [0, 1) keyed by `parts`.
pub fn unit_draw(parts: &[u64]) -> f64 {
    ChaCha8Rng::seed_from_u64(mix(parts)).random::<f64>()
}
