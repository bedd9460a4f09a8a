//! Seeded random streams.
//!
//! Every stochastic quantity is drawn from a stream keyed by
//! `(seed, stream, index)`, so ensemble results do not depend on the order
//! in which points are processed or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha12Rng;

/// Stream labels used by the pipeline. Distinct labels give independent draws.
pub mod streams {
    pub const SOURCE_SAMPLES: u64 = 0x10;
    pub const TARGET_SAMPLES: u64 = 0x11;
    pub const HELD_OUT_SOURCE: u64 = 0x12;
    pub const HELD_OUT_TARGET: u64 = 0x13;
    pub const FORWARD_A: u64 = 0x20;
    pub const FORWARD_B: u64 = 0x21;
    pub const REVERSE_A: u64 = 0x22;
    pub const REVERSE_B: u64 = 0x23;
    pub const CYCLE_FORWARD_B: u64 = 0x24;
    pub const CYCLE_REVERSE_A: u64 = 0x25;
    pub const HELD_OUT_FORWARD_A: u64 = 0x26;
    pub const HELD_OUT_FORWARD_B: u64 = 0x27;
    pub const HELD_OUT_REVERSE_B: u64 = 0x28;
    pub const OT_MONTE_CARLO: u64 = 0x30;
    pub const OT_REVERSE_MONTE_CARLO: u64 = 0x31;
    pub const PROBES: u64 = 0x40;
    pub const SCORE_MATCHING: u64 = 0x41;
}

/// Label for segment `segment` of a piecewise integration on `stream`, so
/// consecutive segments do not replay the same noise.
pub fn segment_stream(stream: u64, segment: u64) -> u64 {
    stream ^ ((segment + 1) << 32)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> StreamRng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
    StreamRng::seed_from_u64(key)
}

pub fn fill_standard_normal(rng: &mut StreamRng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
