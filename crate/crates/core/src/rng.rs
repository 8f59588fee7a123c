//! Deterministic random streams.
//!
//! Every stochastic stage draws from its own ChaCha stream keyed by the run
//! seed plus a purpose tag and counters, so runs are reproducible and the
//! draws of one stage never shift those of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generator for `seed` and the given key path.
pub fn stream(seed: u64, key: &[u64]) -> Rng {
    let mut h = splitmix64(seed);
    for &k in key {
        h = splitmix64(h ^ k);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Purpose tags for [`stream`].
pub mod tag {
    pub const INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const PSEUDO_LABEL: u64 = 4;
    pub const TRAIN_DROPOUT: u64 = 5;
    pub const SPLIT: u64 = 6;
}
