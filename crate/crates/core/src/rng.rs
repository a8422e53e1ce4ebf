//! Seed derivation: every random draw in the crate comes from a stream keyed by
//! a base seed plus a few integers (step, purpose tag, item index).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_SAMPLE: u64 = 1;
pub const TAG_MASK: u64 = 2;
pub const TAG_PAIRS: u64 = 3;
pub const TAG_DROPOUT: u64 = 4;
pub const TAG_INIT: u64 = 5;
pub const TAG_IMAGES: u64 = 6;
pub const TAG_CAPTIONS: u64 = 7;
pub const TAG_NOISE: u64 = 8;
pub const TAG_WORLD: u64 = 9;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with further keys into one 64-bit seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}
