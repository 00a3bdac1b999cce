//! Seeded random substreams.
//!
//! Every randomized step draws from a ChaCha8 stream selected by
//! `(seed, purpose, key)`, so results never depend on the order in which
//! features, folds or samples are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable consulted by the CLI for a default seed.
pub const SEED_ENV: &str = "AICO_SEED";

/// 64-bit FNV-1a; stable across platforms and compiler versions.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
        // separator so ("ab","c") != ("a","bc")
        h ^= 0xff;
        h = h.wrapping_mul(PRIME);
    }
    h
}

pub fn substream(seed: u64, purpose: &str, key: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_hash(&[purpose.as_bytes(), key.as_bytes()]));
    rng
}

/// Stream indexed by an integer counter (per-sample generation).
pub fn counter_stream(seed: u64, purpose: &str, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&[purpose.as_bytes()]));
    rng.set_stream(counter);
    rng
}
