use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use evtex_core::container::sha256_hex;
use serde::Serialize;

use crate::error::{io_err, Result};

/// Provenance record written beside every command's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub preset: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, preset: String, config_hash: String, seed: u64) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            preset,
            config_hash,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `bytes` to `path` and records its hash.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
        }
        fs::write(path, bytes).map_err(io_err(path))?;
        self.outputs.insert(path.display().to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.insert(key.into(), value.to_string());
    }

    pub fn save(&self, path: PathBuf) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(io_err(path))
    }
}
