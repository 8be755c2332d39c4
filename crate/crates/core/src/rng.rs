//! Seed handling.
//!
//! Every random stream in the crate is a ChaCha8 generator derived from a
//! root seed and a purpose label, so adding draws to one stage never shifts
//! the numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive the seed of a named substream, e.g. `substream_seed(7, "dataset")`.
pub fn substream_seed(root: u64, purpose: &str) -> u64 {
    // FNV-1a over the label, then mixed with the root seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(root ^ splitmix64(h))
}

/// Seed for the `index`-th item of a stream (scene, iteration, step).
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(root: u64, purpose: &str) -> Rng {
    rng_from_seed(substream_seed(root, purpose))
}
