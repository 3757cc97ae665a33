use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub kind: String,
    pub sha256: String,
}

/// `manifest.json`: every artifact of a command with its digest, and the
/// hashes of the configs that produced them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub artifacts: Vec<Artifact>,
    pub config_hashes: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            ..Self::default()
        }
    }

    /// Record a file under `root`, hashing its current contents.
    pub fn add(&mut self, root: &Path, path: &Path, kind: &str) -> Result<()> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.artifacts.push(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            kind: kind.to_string(),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    pub fn config(&mut self, label: impl Into<String>, hash: impl Into<String>) {
        self.config_hashes.insert(label.into(), hash.into());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Write a text artifact and record it.
pub fn write_artifact(manifest: &mut Manifest, root: &Path, name: &str, kind: &str, text: &str) -> Result<PathBuf> {
    let path = root.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    manifest.add(root, &path, kind)?;
    Ok(path)
}
