//! Deterministic seed derivation.
//!
//! Every randomized stage draws from a ChaCha8 stream seeded by mixing the
//! run seed with a stable label, so adding or reordering stages never
//! perturbs the streams of the others, and results are identical across
//! platforms and thread counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over raw bytes; also used for content hashes in manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a purpose label into a fresh sub-seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ fnv1a64(label.as_bytes()))
}

/// Sub-seed that additionally depends on an index (sample id, epoch, ...).
pub fn derive_seed_indexed(base: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(base, label) ^ splitmix64(index))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, label: &str) -> ChaCha8Rng {
    rng_from(derive_seed(base, label))
}
