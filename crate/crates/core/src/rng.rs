//! Seeded, splittable random streams.
//!
//! Every consumer derives its own ChaCha8 stream from a global seed and a
//! key path, so results never depend on the order in which work runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Key-path tags for the different consumers.
pub mod tag {
    pub const SCENARIO: u64 = 1;
    pub const COVARIATES: u64 = 2;
    pub const FRAILTY: u64 = 3;
    pub const EVENTS: u64 = 4;
    pub const CENSORING: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const NETWORK: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a key path into a single 64-bit value.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Independent stream for `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(derive_key(seed, path));
    rng
}
