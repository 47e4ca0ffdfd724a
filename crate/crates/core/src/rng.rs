//! Seeded random streams.
//!
//! Every random decision draws from a PCG-XSL-RR 128/64 generator
//! (`rand_pcg::Pcg64`). A stream is fully determined by `(seed, stream_id)`:
//!
//! ```text
//! state     = (splitmix64(seed) << 64) | splitmix64(seed ^ 0x9E37_79B9_7F4A_7C15)
//! increment = stream_id
//! ```
//!
//! which any PCG implementation can reproduce.

use rand_pcg::Pcg64;

/// Stream identifiers. New purposes get new ids; existing ids never change.
pub mod streams {
    pub const SCENE_LAYOUT: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const CLIP: u64 = 3;
    pub const SUPERVISION: u64 = 4;
    pub const RANSAC: u64 = 5;
    pub const INIT: u64 = 6;
    pub const TRAIN_STEP: u64 = 7;
    pub const DATASET: u64 = 8;
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream_id: u64) -> Pcg64 {
    let hi = splitmix64(seed) as u128;
    let lo = splitmix64(seed ^ 0x9E37_79B9_7F4A_7C15) as u128;
    Pcg64::new((hi << 64) | lo, stream_id as u128)
}

/// Derives a child seed, e.g. one per sequence or per training step.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}
