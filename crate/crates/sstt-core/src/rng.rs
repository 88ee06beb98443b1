//! Seed derivation for order-independent randomness.
//!
//! Every stochastic site derives its own stream from the global seed plus a
//! tag and counters (FNV-1a), so shuffles and augmentation draws depend only
//! on (seed, sample, epoch), never on worker scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stable_hash(seed: u64, tag: &str, parts: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(&seed.to_le_bytes());
    eat(tag.as_bytes());
    for p in parts {
        eat(&p.to_le_bytes());
    }
    h
}

pub fn derive_rng(seed: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(seed, tag, parts))
}

pub fn sample_rng(seed: u64, sample_id: &str, epoch: u64) -> ChaCha8Rng {
    let mut h = stable_hash(seed, "sample", &[epoch]);
    h = stable_hash(h, sample_id, &[]);
    ChaCha8Rng::seed_from_u64(h)
}
