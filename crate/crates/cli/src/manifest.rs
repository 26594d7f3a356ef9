//! `manifest.toml`: the config that produced a run and a digest of every artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const FILE_NAME: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    /// Raw config text, byte for byte.
    pub config: String,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Artifact {
    pub fn of(path: &str, bytes: &[u8]) -> Self {
        Self { path: path.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 }
    }
}

impl Manifest {
    pub fn new(raw_config: &str, mut artifacts: Vec<Artifact>) -> Self {
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        Self { config_sha256: sha256_hex(raw_config.as_bytes()), config: raw_config.to_string(), artifacts }
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Validation(e.to_string()))?;
        fs::write(out_dir.join(FILE_NAME), text)?;
        Ok(())
    }

    pub fn read(out_dir: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(out_dir.join(FILE_NAME))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Artifacts whose bytes on disk no longer match their digest.
    pub fn stale(&self, out_dir: &Path) -> Result<Vec<String>, CliError> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            let bytes = fs::read(out_dir.join(&a.path))?;
            if sha256_hex(&bytes) != a.sha256 || bytes.len() as u64 != a.bytes {
                bad.push(a.path.clone());
            }
        }
        Ok(bad)
    }
}
