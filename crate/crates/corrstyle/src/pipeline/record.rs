//! Run records and atomic artifact writes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Write a file atomically: the writer produces a sibling temp path, which
/// is then renamed into place. A crash mid-write never leaves a truncated
/// artifact at `path`.
pub fn atomic_write<F>(path: &Path, writer: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".to_string());
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    if let Err(e) = writer(&tmp) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

/// [`atomic_write`] specialized to a byte buffer.
pub fn atomic_write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, |tmp| std::fs::write(tmp, bytes).map_err(Into::into))
}

/// Provenance record emitted next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    /// Tool version that produced the run.
    pub version: String,
    /// Subcommand that produced the run.
    pub command: String,
    /// SHA-256 of the fully resolved configuration, for reproducibility
    /// checks across runs.
    pub config_sha256: String,
    /// The resolved configuration itself, serialized as TOML.
    pub resolved_config: String,
    /// Seed that governed all stochastic draws.
    pub seed: u64,
}

impl RunRecord {
    pub fn new(command: &str, resolved_config_toml: &str, seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(resolved_config_toml.as_bytes());
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: hex::encode(hasher.finalize()),
            resolved_config: resolved_config_toml.to_string(),
            seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        atomic_write_bytes(path, json.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_parents_and_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/deep/out.txt");
        atomic_write_bytes(&path, b"hello").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"hello");
        // Overwrite works and leaves no temp files behind.
        atomic_write_bytes(&path, b"world").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"world");
        let leftovers: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn run_record_hash_tracks_config() {
        let a = RunRecord::new("evaluate", "steps = 50\n", 1);
        let b = RunRecord::new("evaluate", "steps = 50\n", 2);
        let c = RunRecord::new("evaluate", "steps = 25\n", 1);
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_ne!(a.config_sha256, c.config_sha256);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        a.save(&path).unwrap();
        let loaded: RunRecord =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(loaded.config_sha256, a.config_sha256);
    }
}
