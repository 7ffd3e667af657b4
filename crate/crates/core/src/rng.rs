//! Counter-keyed random streams.
//!
//! Every random draw in the crate comes from a stream addressed by
//! `(seed, label, indices...)`. Two calls with the same address yield the
//! same generator regardless of which worker asks, so ensembles are
//! identical under any parallel schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream labels. Distinct labels keep purposes from sharing bits.
pub mod label {
    pub const BROWNIAN: u64 = 0x4252_4f57;
    pub const PATH: u64 = 0x5041_5448;
    pub const JUMPS: u64 = 0x4a55_4d50;
    pub const COUPLING: u64 = 0x434f_5550;
    pub const CHAIN_SYNC: u64 = 0x5359_4e43;
    pub const CHAIN_AUX: u64 = 0x4155_5831;
    pub const CHAIN_MERGE: u64 = 0x4d45_5247;
    pub const BOOTSTRAP: u64 = 0x424f_4f54;
    pub const ENSEMBLE_RIGHT: u64 = 0x5249_4754;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const HELD_OUT: u64 = 0x484f_4c44;
    pub const ITERATE: u64 = 0x4954_4552;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a seed and a key path into one 64-bit derived seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x6572_676f_6b69_7421);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    h
}

/// Generator for the stream at `(seed, keys)`.
pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    let mut key = [0u8; 32];
    let mut h = derive_seed(seed, keys);
    for chunk in key.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
