//! Named, reproducible random streams.
//!
//! Every random draw in the lab comes from a ChaCha stream whose seed is a
//! hash of `(master seed, purpose tag, index)`. Two components never share a
//! stream, so adding draws in one place cannot shift the numbers elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a 256-bit seed from the master seed, a purpose tag and an index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    seed
}

pub fn stream(master: u64, tag: &str, index: u64) -> Rng {
    ChaCha8Rng::from_seed(derive_seed(master, tag, index))
}

/// A derived 64-bit seed, for components that take a plain master seed.
pub fn derive_u64(master: u64, tag: &str, index: u64) -> u64 {
    let seed = derive_seed(master, tag, index);
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&seed[..8]);
    u64::from_le_bytes(bytes)
}

/// Deterministic 64-bit digest of a string, stable across platforms and
/// toolchains (unlike `DefaultHasher`).
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
