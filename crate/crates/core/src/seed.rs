//! Deterministic seed derivation.
//!
//! Every stochastic stage (subject geometry, noise series, weight init,
//! batch shuffling) draws from its own stream derived from one master seed,
//! so adding subjects or reordering stages never perturbs the others.

/// SplitMix64 step; a well-mixed 64-bit permutation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `master` for the given stream id.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Stream tags for the pipeline stages.
pub const STREAM_GEOMETRY: u64 = 1;
pub const STREAM_SERIES: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
