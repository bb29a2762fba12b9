//! Deterministic derivation of independent random substreams.
//!
//! Every randomized stage (data generation, scan draws, replication workers)
//! gets its own generator derived from `(master seed, role, index)`. The
//! derivation is a fixed hash, so results do not depend on thread scheduling
//! or on the order in which stages run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A 64-bit seed derived from `(seed, role, index)`; stable across runs,
/// platforms, and execution order.
pub fn derive_seed(seed: u64, role: &str, index: u64) -> u64 {
    let mut s = splitmix64(seed ^ fnv1a(role.as_bytes()));
    s = splitmix64(s ^ index.wrapping_mul(GOLDEN));
    s
}

/// Counter-based generator for the given substream.
pub fn substream(seed: u64, role: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, role, index))
}
