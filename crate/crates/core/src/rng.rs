//! Seeded random streams.
//!
//! Every random quantity comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), which
//! produces the same sequence on every platform. One user seed fans out into
//! independent named streams by selecting the ChaCha stream id, so adding a
//! station or an app never shifts the draws of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream families. The low 32 bits of a stream id carry per-family indices.
pub mod family {
    pub const STATION: u64 = 1;
    pub const APP: u64 = 2;
    pub const ARRIVALS: u64 = 3;
    pub const INPUTS: u64 = 4;
    pub const QUEUE: u64 = 5;
    pub const GRADIENT_CHECK: u64 = 6;
    pub const SCENARIO: u64 = 7;
}

/// Generator for stream `(family, index)` under `seed`.
pub fn stream(seed: u64, family: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((family << 32) | (index & 0xffff_ffff));
    rng
}

/// Two-level index packing for streams keyed by (outer, inner).
pub fn pair_index(outer: usize, inner: usize) -> u64 {
    ((outer as u64) << 16) | (inner as u64 & 0xffff)
}

/// Exponential draw with the given mean via the inverse CDF.
pub fn exponential(rng: &mut impl Rng, mean: f64) -> f64 {
    let u: f64 = rng.random();
    -mean * (1.0 - u).ln()
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}
