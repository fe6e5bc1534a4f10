//! Seed derivation for independent deterministic RNG streams.
//!
//! Every stochastic stage (corpus, partition, c-validation draw, grouping,
//! per-client training) gets its own stream derived from one base seed, so
//! results never depend on scheduling or on how many streams a run consumes.

/// SplitMix64 finalizer; bijective on u64 with good avalanche.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a stream tag.
pub fn mix(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ splitmix64(tag))
}

/// Derives the training seed for one client update from the run seed,
/// the 1-based round index, and the client id.
///
/// Part of the public contract: reference implementations that want to
/// reproduce a run bitwise must derive per-client seeds the same way.
pub fn client_seed(run_seed: u64, round: usize, client_id: usize) -> u64 {
    mix(
        mix(run_seed, round as u64),
        0x636C_69656E740000 ^ client_id as u64,
    )
}
