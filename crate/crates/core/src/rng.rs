//! Seed plumbing. Every random stream in the engine is a ChaCha8 generator
//! seeded from the master seed and a fixed stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type EngineRng = ChaCha8Rng;

/// Mixes a master seed with stream labels (splitmix64 finalizer per label).
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    let mut h = master ^ 0x9e37_79b9_7f4a_7c15;
    for &l in labels {
        h = mix(h.wrapping_add(l).wrapping_add(0x9e37_79b9_7f4a_7c15));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> EngineRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(master: u64, labels: &[u64]) -> EngineRng {
    rng_from(derive_seed(master, labels))
}
