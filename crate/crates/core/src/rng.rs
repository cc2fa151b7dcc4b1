//! Seed derivation so every consumer (shuffling, augmentation, init) draws
//! from its own reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Domain tags keep streams for different purposes apart.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SYNTHETIC: u64 = 4;
    pub const EVAL: u64 = 5;
}

/// Stream for `(seed, domain, a, b)`; distinct tuples give independent streams.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> Rng {
    let key = splitmix(splitmix(seed ^ splitmix(domain)) ^ splitmix(a.wrapping_add(0x51)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(b);
    rng
}
