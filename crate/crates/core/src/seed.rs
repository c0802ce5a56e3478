//! Seed derivation.
//!
//! Every random stream in a simulation is keyed by an explicit base seed
//! plus a path of integers (round, client id, purpose tag). Streams never
//! depend on scheduling order, so results are independent of worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `base` with each element of `path` into a new 64-bit seed.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    rng(derive(base, path))
}

/// `floor(fraction * n)`, tolerant of binary rounding (0.7 * 40 is 27.999…).
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor().max(0.0) as usize
}

/// `ceil(fraction * n)`, tolerant of binary rounding.
pub fn fraction_count_ceil(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize
}
