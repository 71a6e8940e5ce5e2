//! Seed splitting.
//!
//! Every random decision in a run draws from a ChaCha8 stream identified by
//! `(seed, domain, index)`. The key is a SplitMix64 mix of the seed and the
//! domain tag; the ChaCha stream number is the index (a node id, a run index,
//! ...). Adding nodes or runs therefore never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Values are part of the reproducibility contract.
pub mod domain {
    pub const SOURCES: u64 = 0x5352_4353;
    pub const ARRIVALS: u64 = 0x4152_5256;
    pub const CACHE_POLICY: u64 = 0x4341_4348;
    pub const RUN: u64 = 0x5255_4e53;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(domain));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Seed of the `run_index`-th replication of an experiment.
pub fn run_seed(seed: u64, run_index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ domain::RUN).wrapping_add(run_index))
}
