//! Deterministic RNG derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream derived
//! from `(root seed, stream tag, index)`. Training steps, dataset records
//! and synthesis jobs are therefore pure functions of their coordinates,
//! which is what makes resume-from-checkpoint bitwise equal to a straight
//! run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable string hash (FNV-1a 64) for stream tags and record ids.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for stream `tag` at position `index` under `root`.
pub fn derive_rng(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&root.to_le_bytes());
    seed[8..16].copy_from_slice(&hash_str(tag).to_le_bytes());
    seed[16..24].copy_from_slice(&index.to_le_bytes());
    seed[24..32].copy_from_slice(&(root ^ index.rotate_left(17)).to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
