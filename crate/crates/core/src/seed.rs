//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from one root seed plus a domain
//! tag and a few integers, so parallel and sequential schedules draw the same
//! values for the same logical step.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a 32-byte key from `root`, a domain `tag` and `parts`.
pub fn derive_key(root: u64, tag: &str, parts: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"xclp/seed/v1");
    hasher.update(root.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

pub fn derive_seed(root: u64, tag: &str, parts: &[u64]) -> u64 {
    let key = derive_key(root, tag, parts);
    u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
}

/// ChaCha20 stream keyed by [`derive_key`].
pub fn derive_rng(root: u64, tag: &str, parts: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_key(root, tag, parts))
}
