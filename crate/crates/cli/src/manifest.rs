//! Per-invocation run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one subcommand invocation, written when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub exit_status: Option<i32>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))
}

impl RunManifest {
    pub fn begin(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config: serde_json::Value::Null,
            seed: None,
            artifacts: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            exit_status: None,
        }
    }

    pub fn set_config(&mut self, config: &impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    /// Stamps the end time and status and writes `manifest.json` into `dir`.
    /// A successful run must list only existing artifacts.
    pub fn finish(&mut self, dir: &Path, exit_status: i32) -> Result<PathBuf> {
        self.finished_unix_ms = Some(now_ms());
        self.exit_status = Some(exit_status);
        if exit_status == 0 {
            if let Some(missing) = self.artifacts.iter().find(|p| !p.exists()) {
                bail!("artifact {} is listed but missing", missing.display());
            }
        }
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, &serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
