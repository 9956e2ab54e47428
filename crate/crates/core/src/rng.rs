//! Seeded random streams. Every stochastic routine takes one of these so a
//! `(seed, config, data)` triple fully determines its output.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256PlusPlus as StaRng;

pub fn seeded(seed: u64) -> StaRng {
    StaRng::seed_from_u64(seed)
}

/// Independent stream for run `index` of a grid started from `seed`.
pub fn derive(seed: u64, index: u64) -> StaRng {
    // splitmix-style mixing so neighbouring (seed, index) pairs decorrelate
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    StaRng::seed_from_u64(z ^ (z >> 31))
}
