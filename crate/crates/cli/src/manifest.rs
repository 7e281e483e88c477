use std::path::{Path, PathBuf};

use repeater_core::protocol::Backend;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Provenance record written next to every output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical (expanded, re-serialized) configuration.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub backend: Option<Backend>,
    pub ttr: Option<usize>,
    pub wall_clock_seconds: f64,
    pub covered_mass: Option<f64>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            seed: None,
            backend: None,
            ttr: None,
            wall_clock_seconds: 0.0,
            covered_mass: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `<out>.manifest.json`
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
