//! SHA-256 content digests used for cache keys and manifests.

use std::path::Path;

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of the concatenation of `parts`, each prefixed by its length so
/// that `["ab", "c"]` and `["a", "bc"]` differ.
pub fn sha256_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(std::fs::read(path)?))
}

/// First eight digest bytes as an integer, for seeding.
pub fn seed_from_text(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}
