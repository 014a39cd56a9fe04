//! Seed plumbing. Every random stream in the crate is a `ChaCha8Rng` whose
//! seed is derived from a root seed plus a stream tag, so that independent
//! consumers never share or perturb each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and an ordered list of stream tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

// Stream tags. Values are arbitrary but frozen: changing one changes every
// reproduced result.
pub(crate) const TAG_INIT: u64 = 0x1001;
pub(crate) const TAG_SHUFFLE: u64 = 0x1002;
pub(crate) const TAG_REPLAY: u64 = 0x1003;
pub(crate) const TAG_RESERVOIR: u64 = 0x1004;
pub(crate) const TAG_FISHER: u64 = 0x1005;
pub(crate) const TAG_DATA: u64 = 0x2001;
pub(crate) const TAG_SPLIT: u64 = 0x2002;
pub(crate) const TAG_TASK: u64 = 0x3001;
pub(crate) const TAG_REGIME: u64 = 0x3002;
