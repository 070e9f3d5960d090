pub mod exec;
pub mod nn;
pub mod pipeline;
pub mod sim;
pub mod verdata;
pub mod verifier;
pub mod wam;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
