//! Named, seeded random streams.
//!
//! Every source of randomness in a run is derived from one master seed and a
//! label, so that adding a new consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive an independent generator from `(seed, label)`.
pub fn substream(seed: u64, label: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derive a child seed; useful when a seed must be stored rather than a generator.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    substream(seed, label).next_u64()
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    rng.sample(rand_distr::StandardNormal)
}
