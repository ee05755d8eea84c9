//! Seed derivation.
//!
//! All randomness in a run flows from one 64-bit seed. Subsystems derive
//! their own counter-based substreams by mixing the seed with a purpose
//! string and integer coordinates through splitmix64, which is stable across
//! platforms and compiler versions (unlike `std::hash`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit mix of a seed, a purpose tag and a list of coordinates.
pub fn derive_seed(seed: u64, purpose: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for b in purpose.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    // separator so ("ab", [1]) and ("a", [b, 1]) cannot collide trivially
    h = splitmix64(h ^ 0xFF);
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn stream(seed: u64, purpose: &str, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, purpose, coords))
}
