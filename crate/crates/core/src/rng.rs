//! Deterministic RNG plumbing.
//!
//! Every stochastic choice in the crate draws from a ChaCha8 stream seeded
//! through [`child_seed`], so that independent components (world build,
//! per-epoch subset draws, estimator inits) have decorrelated but fully
//! reproducible streams, and parallel execution cannot reorder draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the standard stream-splitting finalizer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a salt path.
pub fn child_seed(root: u64, salts: &[u64]) -> u64 {
    let mut s = splitmix64(root);
    for &salt in salts {
        s = splitmix64(s ^ splitmix64(salt.wrapping_add(0x515_7ee1)));
    }
    s
}

/// ChaCha8 stream for a (root, salts) path.
pub fn stream(root: u64, salts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(root, salts))
}
