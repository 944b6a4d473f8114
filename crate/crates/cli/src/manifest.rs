//! Per-subcommand run records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const TOOL_VERSION: &str = concat!("acros ", env!("CARGO_PKG_VERSION"));

/// Everything needed to rerun a subcommand and check its numbers.
///
/// `config` is the effective configuration (after flag overrides) as TOML;
/// passing a manifest to `--config` replays it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool: String,
    pub subcommand: String,
    pub seed: u64,
    pub config: String,
    /// Run-relative path to sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Run-relative path to sha256 of every file written.
    pub artifacts: BTreeMap<String, String>,
    /// Table name to the exact text written under `tables/`.
    pub tables: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
}

impl ExperimentManifest {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
        crate::write_file(path, &(text + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("malformed manifest {}: {e}", path.display())))
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Hashes `paths`, keyed relative to `root` when possible.
pub fn hash_files(root: &Path, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
    paths
        .iter()
        .map(|p| {
            let key = p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned();
            Ok((key, sha256_file(p)?))
        })
        .collect()
}
