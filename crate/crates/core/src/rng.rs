//! Deterministic random substreams.
//!
//! Every random draw in generation and training comes from a ChaCha stream
//! keyed by a tuple of integers, so any substream can be recreated without
//! replaying the ones before it. This is what makes checkpoint resume exact:
//! no generator state needs to be saved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purposes for training-time substreams. The discriminant is part of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    LabeledBatch = 2,
    UnlabeledBatch = 3,
    LabeledAugment = 4,
    UnlabeledWeak = 5,
    UnlabeledStrong = 6,
    LabeledNegatives = 7,
    UnlabeledNegatives = 8,
    Split = 9,
    Generate = 10,
    MixupPartner = 11,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an arbitrary key tuple into a single 64-bit seed.
pub fn mix_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x1234_5678_9ABC_DEF0u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix_key(parts))
}

/// Substream for one training-time purpose.
pub fn train_stream(seed: u64, step: usize, purpose: Purpose, index: usize) -> StreamRng {
    stream(&[seed, step as u64, purpose as u64, index as u64])
}
