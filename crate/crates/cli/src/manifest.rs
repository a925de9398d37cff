//! Provenance record written into every output directory before work starts.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use conpres::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    /// TOML snapshot of the effective training configuration.
    pub config: Option<String>,
    pub dataset_hash: Option<String>,
    pub code_version: String,
    pub seed: Option<u64>,
    pub started_unix: u64,
}

impl RunManifest {
    pub fn new(config: Option<String>, dataset_hash: Option<String>, seed: Option<u64>) -> Self {
        Self {
            command_line: std::env::args().collect(),
            config,
            dataset_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    /// Writes to `path`; an existing manifest is never replaced.
    pub fn write_new(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        let mut f =
            std::fs::OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| Error::io(path, e))?;
        std::io::Write::write_all(&mut f, text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Refuses to reuse a directory that already holds a manifest unless `overwrite` is set,
/// in which case the old manifest is removed.
pub fn claim_dir(dir: &Path, overwrite: bool) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        if !overwrite {
            return Err(Error::InvalidArgument(format!(
                "{} already holds a run; pass --overwrite to replace it",
                dir.display()
            )));
        }
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(path)
}
