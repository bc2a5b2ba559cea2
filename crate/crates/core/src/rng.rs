//! Seed derivation.
//!
//! Every random consumer (initialization, shuffling, environment assignment,
//! synthesis, splitting) draws from its own stream derived from the root seed
//! and a purpose label, so adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const ENV_ASSIGN: &str = "env";
pub const SYNTH: &str = "synth";
pub const SPLIT: &str = "split";

/// Returns the independent stream for `(seed, purpose)`.
pub fn stream(seed: u64, purpose: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
