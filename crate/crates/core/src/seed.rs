//! Every random draw in the crate flows from one user seed through these helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from a single seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    NetInit = 1,
    Training = 2,
    Phantom = 3,
    Speckle = 4,
    Split = 5,
    Extractor = 6,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// SplitMix64 finalizer; maps `(seed, index)` to a well-mixed child seed.
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
