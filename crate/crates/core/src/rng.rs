//! Seed splitting.
//!
//! Every random stream in the crate is derived from one 64-bit root seed and
//! a component name: the name is hashed with 64-bit FNV-1a, xored into the
//! root seed, and the result is finalized with the SplitMix64 mixer. The
//! derived value seeds a ChaCha8 generator. Names are plain strings such as
//! `"simsiam/init"` or `"augment/epoch3/img17"`, so streams never depend on
//! the order in which other components consume randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the sub-seed for `component` from `seed`.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    splitmix64(seed ^ fnv1a(component.as_bytes()))
}

/// A generator for the named component.
pub fn stream(seed: u64, component: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, component))
}
