//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness asks for a stream by name (and optionally an
//! index), so changing how many draws one consumer makes never shifts the
//! draws seen by another. Paired comparisons rely on this: two runs with the
//! same root seed see the same data, initialization and shuffles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const DATA_CENTERS: &str = "data/centers";
pub const DATA_INSTANCES: &str = "data/instances";
pub const DATA_NUISANCE: &str = "data/nuisance";
pub const CONTAMINATION: &str = "contamination";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const EVAL: &str = "eval";
pub const TRIAL: &str = "trial";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Stream `name` (sub-index `index`) of the root `seed`.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    rng.set_stream(splitmix64(name_hash(name) ^ splitmix64(index)));
    rng
}

/// Derive a child seed, e.g. the root seed of the k-th paired run in a sweep.
pub fn child_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ name_hash(name) ^ splitmix64(index.wrapping_add(1)))
}
