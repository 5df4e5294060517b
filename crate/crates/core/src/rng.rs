//! Deterministic random-stream derivation.
//!
//! Every stochastic consumer derives its own generator from a user seed and
//! a fixed purpose tag, so adding draws in one place can never shift the
//! stream seen by another. Step-level generators additionally mix in a
//! counter, making each simulation step a pure function of (seed, step).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for independent streams derived from one user seed.
pub mod stream {
    /// Noise increments of the SDE simulator (mixed with a step counter).
    pub const SIM: u64 = 1;
    /// Autoencoder weight initialization.
    pub const INIT: u64 = 2;
    /// Context-pair subsampling during training refreshes.
    pub const CONTEXT: u64 = 3;
    /// Training batch index draws.
    pub const BATCH: u64 = 4;
    /// Per-batch latent noise draws in the loss.
    pub const EPS: u64 = 5;
    /// Pair subsampling inside `estimator::build_context`.
    pub const SUBSAMPLE: u64 = 6;
}

/// SplitMix64 step; the de-facto standard 64-bit seed mixer.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Collapses (seed, tag) into one well-mixed 64-bit value.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut s = seed;
    let a = splitmix64(&mut s);
    let mut t = a ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    splitmix64(&mut t)
}

/// Collapses (seed, tag, counter) for per-step generators.
pub fn mix3(seed: u64, tag: u64, counter: u64) -> u64 {
    mix(mix(seed, tag), counter)
}

/// Stream generator for a (seed, purpose) pair.
pub fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}

/// Counter-seeded generator: fresh state per (seed, purpose, step).
pub fn counter_rng(seed: u64, tag: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix3(seed, tag, counter))
}

/// Samples `k` distinct indices from `0..n` (seeded, ascending order).
///
/// Partial Fisher-Yates over an index table; output sorted so downstream
/// consumers see pairs in temporal order.
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} from {n}");
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}
