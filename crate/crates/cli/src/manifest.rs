//! Run manifests: enough to rerun a command and check its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use rss_core::data::file_sha256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the command ran in; relative paths in `argv` resolve
    /// against it.
    pub cwd: PathBuf,
    /// Every parameter after defaults were applied.
    pub params: serde_json::Value,
    /// Input path to sha256. Dataset containers hash to a digest over their files.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to `out_dir`) to sha256.
    pub outputs: BTreeMap<String, String>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    pub version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(&self.command));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

/// sha256 of every listed output, keyed by name.
pub fn hash_outputs(dir: &Path, names: &[String]) -> Result<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| {
            let path = dir.join(n);
            let digest = hash_path(&path)?;
            Ok((n.clone(), digest))
        })
        .collect()
}

/// sha256 of a file, or the container checksum of a dataset directory.
pub fn hash_path(path: &Path) -> Result<String> {
    let digest = if path.is_dir() {
        rss_core::data::container_checksum(path)
    } else {
        file_sha256(path)
    };
    digest.with_context(|| format!("hashing {}", path.display()))
}
