//! Content hashing for provenance stamps.

use sha2::{Digest, Sha256};

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hash of a serializable value's canonical JSON form.
pub fn config_hash<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("serializable config");
    sha256_hex(json.as_bytes())
}
