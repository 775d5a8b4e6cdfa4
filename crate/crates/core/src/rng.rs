//! Named random sub-streams derived from one root seed.
//!
//! Every stochastic component draws from its own stream so that changing,
//! say, the pixel noise does not shift the IMU noise realization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Seed of the sub-stream `name` under `root`.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name))
}

/// Sub-stream for item `index` of a named family (per frame, per epoch, ...).
pub fn indexed_substream(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    let base = substream_seed(root, name);
    ChaCha8Rng::seed_from_u64(substream_seed(base, &index.to_string()))
}
