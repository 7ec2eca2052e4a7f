//! Deterministic random-number streams.
//!
//! Every source of randomness in the crate is a [`ChaCha8Rng`] seeded from
//! `sha256(seed || tag || index)`. Deriving independent streams by purpose
//! tag and index (rather than drawing from one sequential generator) means
//! results never depend on evaluation order: adding parallelism, reordering
//! phases, or attacking examples in different batch partitions cannot change
//! any output.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives the stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(tag.as_bytes());
    hasher.update([0x1f]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw from `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal draw via the Box-Muller transform.
///
/// Each call consumes exactly two uniforms, so streams stay reproducible
/// regardless of how many draws a caller interleaves.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Unit-rate exponential draw (`-ln U`).
pub fn exponential(rng: &mut ChaCha8Rng) -> f64 {
    -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()
}

/// Fisher-Yates shuffle of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
