//! Seed derivation. Every stochastic component takes an explicit `u64` seed
//! and builds its own generator; child seeds are derived by mixing a parent
//! seed with a stream index so that work can be split across threads without
//! changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from `parent` and a stream index.
pub fn derive(parent: u64, stream: u64) -> u64 {
    mix(mix(parent) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Derive along a path of stream indices.
pub fn derive_path(parent: u64, path: &[u64]) -> u64 {
    path.iter().fold(parent, |s, &p| derive(s, p))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
