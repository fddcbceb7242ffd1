//! Deterministic sub-seed derivation.
//!
//! One master seed drives every random stage of the pipeline. Each stage
//! draws from its own stream so that, say, changing the split seed never
//! perturbs the balanced subset.

use sha2::{Digest, Sha256};

/// Derive an independent 64-bit sub-seed from a master seed and a stream
/// label. Stable across platforms and releases of this crate.
pub fn subseed(master: u64, stream: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(stream.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
