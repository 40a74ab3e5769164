use sha2::{Digest, Sha256};

/// First 8 bytes of SHA-256, as a stable 64-bit content hash.
pub(crate) fn content_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}
