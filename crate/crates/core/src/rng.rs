//! Seed derivation. Every stochastic component takes an explicit seed and
//! derives child seeds from it so that work can be split across threads
//! without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a parent seed and a stream index.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(31) ^ mix64(stream.wrapping_add(1)))
}

/// Derive a child seed keyed by a string label (stage name, method, ...).
pub fn derive_str(seed: u64, label: &str) -> u64 {
    let h = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    derive(seed, h)
}
