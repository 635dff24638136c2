//! Seed derivation and configuration fingerprints.
//!
//! Every random stage draws from `derive_seed(master, stage)`, so a whole
//! pipeline run is reproducible from one integer while stages stay
//! independent of each other.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of `SHA-256(master_le || stage)`.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes to JSON");
    hex(&Sha256::digest(json))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
