//! Deterministic generator streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for; keeps unrelated consumers from
/// drawing the same numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Photometric = 4,
    Subset = 5,
    Synthetic = 6,
}

/// A ChaCha8 stream keyed by `(seed, purpose)` and positioned at `index`
/// (an epoch or worker number).
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
