//! Deterministic random streams derived from a global seed and a label.
//!
//! Each consumer (a weight tensor, an augmentation worker, a synthetic record)
//! gets its own ChaCha8 stream keyed by hashing `(seed, label)`, so streams are
//! independent of each other and of the order in which they are created.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A reproducible RNG for the given seed and purpose label.
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
