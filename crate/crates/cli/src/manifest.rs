//! Run manifests: every command records its inputs, resolved configuration and
//! outputs, each file identified by a content hash.

use std::path::{Path, PathBuf};

use imae_core::{ExperimentConfig, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Git-style object hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileEntry {
    pub role: String,
    pub path: PathBuf,
    pub bytes: u64,
    pub hash: String,
}

impl FileEntry {
    pub fn read(role: &str, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self {
            role: role.into(),
            path: path.to_path_buf(),
            bytes: bytes.len() as u64,
            hash: content_hash(&bytes),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            config: cfg.to_json(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(FileEntry::read(role, path)?);
        Ok(())
    }

    /// Write `bytes` to `dir/name` and record it as an output.
    pub fn write_output(&mut self, dir: &Path, name: &str, role: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes)?;
        self.outputs.push(FileEntry {
            role: role.into(),
            path: PathBuf::from(name),
            bytes: bytes.len() as u64,
            hash: content_hash(bytes),
        });
        Ok(path)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}
