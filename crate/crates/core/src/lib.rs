//! Recurrence-free handwritten text-line recognition with a gated fully
//! convolutional network trained under the CTC criterion.

pub mod tensor;
pub mod ctc;
pub mod metrics;
pub mod model;
pub mod data;
pub mod train;

/// First 16 hex digits of the SHA-256 of `s`.
pub(crate) fn digest_hex(s: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(s.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
