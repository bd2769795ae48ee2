use serde::Serialize;
use sha2::{Digest, Sha256};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a value's canonical JSON form (struct field order, no whitespace).
pub(crate) fn json_digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("digestible values serialise");
    sha256_hex(&bytes)
}
