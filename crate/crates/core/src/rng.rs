//! Seed derivation. Every random stream in a run is a named substream of the
//! top-level seed so that runs are reproducible piece by piece.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `parts` into `seed`. Order-sensitive. Results are 63-bit so that
/// derived seeds fit a TOML integer.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p))) >> 1
}

/// Stable 64-bit hash of a stream name (FNV-1a).
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of the named substream, e.g. `substream(seed, "split")`.
pub fn substream(seed: u64, name: &str) -> u64 {
    derive(seed, &[name_hash(name)])
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, parts))
}
