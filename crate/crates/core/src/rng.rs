//! Named, reproducible random streams.
//!
//! A stream is a root seed plus a derivation path such as
//! `train/epoch-3/batch-17/pgd`. The generator for a stream is seeded with the
//! SHA-256 digest of both, so the same `(seed, path)` always yields the same
//! sequence and distinct paths yield unrelated sequences.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    path: String,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: String::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    /// Derives a sub-stream by appending `name` to the path.
    pub fn child(&self, name: impl fmt::Display) -> Self {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.path, name)
        };
        Self {
            seed: self.seed,
            path,
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(b"\0");
        hasher.update(self.path.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}

impl fmt::Display for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.seed, self.path)
    }
}
