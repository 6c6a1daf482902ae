//! Seed derivation. Every random draw in the simulator comes from a ChaCha
//! stream keyed by the experiment seed plus a path of stream labels, so that
//! results do not depend on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each label in turn.
pub fn derive(base: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(base), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn rng(base: u64, labels: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(base, labels))
}

// Stream labels.
pub(crate) const PRETRAINED: u64 = 1;
pub(crate) const TRUTH: u64 = 2;
pub(crate) const CLIENT_SHIFT: u64 = 3;
pub(crate) const SAMPLES: u64 = 4;
pub(crate) const ADAPTER: u64 = 5;
pub(crate) const REINIT: u64 = 6;
pub(crate) const SHUFFLE: u64 = 7;
pub(crate) const TRAIN: u64 = 8;
pub(crate) const SERVER: u64 = 9;
