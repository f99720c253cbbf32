//! Seed derivation. Every stochastic choice in the crate draws from a
//! ChaCha stream keyed by a seed derived from the run seed and a path of
//! integer tags, so independent consumers never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `tag` under `parent`.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Generator for the stream addressed by `tags` under `seed`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let s = tags.iter().fold(seed, |acc, &t| derive_seed(acc, t));
    ChaCha8Rng::seed_from_u64(s)
}
