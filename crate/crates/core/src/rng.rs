//! Seeded generators.
//!
//! Every random draw in the crate comes from ChaCha8 seeded with the user seed
//! via `seed_from_u64`, with a fixed stream id per purpose. ChaCha is
//! counter-based and its output is specified bit-for-bit, so the same
//! `(seed, stream)` produces the same sequence on every platform. The stream
//! assignments below are part of the reproducibility contract; do not renumber.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STREAM_SHOT_SAMPLING: u64 = 1;
pub const STREAM_PARAM_INIT: u64 = 2;
pub const STREAM_SYNTHETIC: u64 = 3;
pub const STREAM_VERIFY: u64 = 4;
/// Epoch `e` shuffles with stream `STREAM_EPOCH_BASE + e`.
pub const STREAM_EPOCH_BASE: u64 = 1 << 32;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// In-place Fisher-Yates shuffle drawing `u32` indices, so results do not
/// depend on the platform's `usize` width.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    assert!(items.len() <= u32::MAX as usize);
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i as u32) as usize;
        items.swap(i, j);
    }
}
