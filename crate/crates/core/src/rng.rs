//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a 64-bit seed mixed from its context (global seed, round,
//! device, layer, ...), so the server can regenerate any device's masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a seed path, e.g. `derive_seed(&[global, round, device])`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_from(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(parts))
}

/// Domain tags keep streams for different purposes disjoint.
pub mod tag {
    pub const MASK: u64 = 0x4D41_534B;
    pub const DATA: u64 = 0x4441_5441;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const INIT: u64 = 0x494E_4954;
    pub const CHANNEL: u64 = 0x4348_414E;
    pub const TEST_SPLIT: u64 = 0x5445_5354;
}
