//! Seed plumbing. Every random stream is a ChaCha8 generator keyed by a
//! master seed and a fixed label, so streams are independent of each other
//! and stable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a sub-seed from `master` and `label`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sub_rng(master: u64, label: &str) -> Rng {
    rng(derive_seed(master, label))
}
