//! Named substreams derived from a single run seed.
//!
//! All randomness in a run flows from one 64-bit seed. Each consumer
//! (featurizer, CV fold shuffle, synthesis, ...) derives its own stream by
//! hashing the master seed together with a label, so adding a new consumer
//! never perturbs existing streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed and a stream label.
pub fn derive(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Deterministic RNG for a named substream.
pub fn rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, label))
}
