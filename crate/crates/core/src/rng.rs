//! Counter-based seed splitting.
//!
//! A run has one 64-bit seed. Every consumer of randomness draws from its
//! own ChaCha stream selected by a label (and optionally an index), so
//! adding a new consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> StreamRng {
    indexed_stream(seed, label, 0)
}

/// Stream for `(label, index)` under `seed`, e.g. one stream per ensemble
/// member or per evaluation point.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = fnv1a(&index.to_le_bytes(), fnv1a(label.as_bytes(), FNV_OFFSET));
    rng.set_stream(id);
    rng
}
