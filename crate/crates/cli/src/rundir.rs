//! Run directories: every artifact lives under one root and is listed in
//! `manifest.json` by its path relative to that root.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::CliConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Resolved configuration, with every component seed filled in.
    pub config: Option<CliConfig>,
    /// Input name to sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub summary: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, config: Option<CliConfig>) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(format!("{}: {e}", root.display())))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            manifest: Manifest {
                command: command.to_string(),
                config,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                summary: BTreeMap::new(),
            },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        let h = hash_file(path)?;
        self.manifest.inputs.insert(name.to_string(), h);
        Ok(())
    }

    pub fn summary(&mut self, key: &str, value: impl ToString) {
        self.manifest.summary.insert(key.to_string(), value.to_string());
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        if !self.manifest.outputs.iter().any(|o| o == rel) {
            self.manifest.outputs.push(rel.to_string());
        }
        Ok(path)
    }

    pub fn finish(mut self) -> Result<Manifest, CliError> {
        self.manifest.outputs.sort();
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| CliError::new("internal", e.to_string()))?;
        let path = self.root.join(MANIFEST);
        fs::write(&path, json + "\n").map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("parse", format!("{}: {e}", path.display())))
}
