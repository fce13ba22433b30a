//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is
//! derived from a user seed plus a purpose tag, so independent consumers never
//! share a stream and results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed tags. Values are arbitrary but fixed forever: changing one changes
/// every downstream result.
pub mod tag {
    pub const CLASS_SPLIT: u64 = 0x01;
    pub const CLASS_SAMPLES: u64 = 0x02;
    pub const EPISODE: u64 = 0x03;
    pub const BACKBONE_INIT: u64 = 0x10;
    pub const HEAD_INIT: u64 = 0x11;
    pub const PRETRAIN_SHUFFLE: u64 = 0x12;
    pub const EDGE_INIT: u64 = 0x20;
    pub const ATTENTION_INIT: u64 = 0x21;
    pub const META_ITERATION: u64 = 0x30;
    pub const MIXUP: u64 = 0x31;
    pub const CONTEXT_QUERY: u64 = 0x32;
    pub const FINETUNE: u64 = 0x40;
    pub const SYNTHETIC: u64 = 0x50;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(tag.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

pub fn derive2(seed: u64, tag: u64, index: u64) -> u64 {
    derive(derive(seed, tag), index)
}

pub fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

pub fn rng_indexed(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive2(seed, tag, index))
}
