//! Seeded sampling helpers over a ChaCha stream.
//!
//! Everything that needs randomness in the crate draws from a
//! [`rand_chacha::ChaCha8Rng`] through these helpers, so runs are
//! bit-reproducible for a fixed seed on any platform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw from `[0, 1)` with 53 random bits.
pub fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw from `[lo, hi)`.
pub fn uniform_in(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    lo + (uniform(rng) as f32) * (hi - lo)
}

/// Uniform index in `0..n`.
pub fn index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    (rng.next_u64() % n as u64) as usize
}

/// One normal draw via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng, mean: f32, std: f32) -> f32 {
    let u1 = uniform(rng).max(f64::MIN_POSITIVE);
    let u2 = uniform(rng);
    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    mean + std * z as f32
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}
