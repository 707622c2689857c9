//! Run manifests: every command resolves its configuration, hashes it,
//! and stamps the hash into each file it produces. Re-running the same
//! manifest reproduces every output byte for byte.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// SHA-256 of the resolved configuration JSON.
    pub config_hash: String,
    /// Output file names, relative to the results directory.
    pub outputs: Vec<String>,
    pub seed: u64,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        resolved_config_json: &str,
        seed: u64,
    ) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        hasher.update(b"\n");
        hasher.update(resolved_config_json.as_bytes());
        let config_hash = format!("{:x}", hasher.finalize());
        Self {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            config_hash,
            outputs: Vec::new(),
            seed,
        }
    }

    pub fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join("manifest.json");
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(&path, json)?;
        Ok(path)
    }

    /// Comment line stamped at the top of CSV outputs.
    pub fn csv_header(&self) -> String {
        format!("# manifest_hash={}\n", self.config_hash)
    }
}
