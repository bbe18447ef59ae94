//! Reproducibility metadata embedded in every written artifact: tool
//! version, run seed, and a hash of the effective configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Version string stamped into artifacts.
pub const TOOL_VERSION: &str = concat!("blc-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn new<T: Serialize>(seed: u64, config: &T) -> Self {
        Self {
            version: TOOL_VERSION.to_string(),
            seed,
            config_hash: config_hash(config),
        }
    }

    /// Header lines for text artifacts (prefixed with `#`).
    pub fn header(&self) -> String {
        format!(
            "# version: {}\n# seed: {}\n# config_hash: {}\n",
            self.version, self.seed, self.config_hash
        )
    }
}

/// SHA-256 over the canonical JSON encoding of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex_digest(&bytes)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
