//! Seed derivation and key hashing shared across the crate.
//!
//! All randomness in the system flows from explicit 64-bit seeds through
//! these mixers, so that independent components (server-side lazy
//! initialization, local V initialization, negative sampling, split
//! assignment, shard selection) derive decorrelated but reproducible
//! streams from a single user-supplied seed.

/// SplitMix64 finalizer. Bijective on u64, good avalanche behavior.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a base seed with a key into a new seed.
pub fn mix64(seed: u64, key: u64) -> u64 {
    splitmix64(seed ^ splitmix64(key))
}

/// Seed of the random stream owned by packed model `p` under `base`.
///
/// Model 0 keeps the base seed unchanged. This makes a packed run
/// reproducible by separate single-model runs: a run whose base seed is
/// `model_stream_seed(base, p)` draws, for its only model, exactly the
/// stream that slice `p` draws in the packed run.
pub fn model_stream_seed(base: u64, model_index: usize) -> u64 {
    if model_index == 0 {
        base
    } else {
        splitmix64(base ^ model_index as u64)
    }
}

/// Shard selection for a key across `num_shards` servers.
pub fn shard_of(key: u64, num_shards: usize) -> usize {
    debug_assert!(num_shards > 0);
    (splitmix64(key) % num_shards as u64) as usize
}
