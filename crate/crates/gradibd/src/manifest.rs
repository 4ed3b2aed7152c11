//! Run manifests: every output directory records the exact command,
//! resolved config, input hashes, seed, and tool version that produced
//! it, so any artifact can be traced and re-run.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest io on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("input {path} hashes to {found}, manifest recorded {recorded}")]
    HashMismatch {
        path: String,
        recorded: String,
        found: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ManifestError {
    ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_file(path: &Path) -> Result<String, ManifestError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    /// Resolved flat config after all overrides.
    pub config_text: String,
    /// Input path (as given) to SHA-256 of its bytes at read time.
    pub input_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn new(command_line: Vec<String>, config: &RunConfig) -> Self {
        Self {
            command_line,
            config_text: config.to_text(),
            input_hashes: BTreeMap::new(),
            seed: config.train.seed,
            tool_version: crate::VERSION.to_string(),
            started_at: Utc::now().to_rfc3339(),
            finished_at: String::new(),
        }
    }

    /// Hash an input file as it is being consumed.
    pub fn add_input(&mut self, path: &Path) -> Result<(), ManifestError> {
        let hash = sha256_file(path)?;
        self.input_hashes.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Re-hash every recorded input and fail on the first mismatch.
    pub fn verify_inputs(&self) -> Result<(), ManifestError> {
        for (path, recorded) in &self.input_hashes {
            let found = sha256_file(Path::new(path))?;
            if &found != recorded {
                return Err(ManifestError::HashMismatch {
                    path: path.clone(),
                    recorded: recorded.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    /// Stamp the completion time and write `manifest.json` into the
    /// output directory.
    pub fn finish_and_save(mut self, out_dir: &Path) -> Result<(), ManifestError> {
        self.finished_at = Utc::now().to_rfc3339();
        let path = out_dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, json).map_err(|e| io_err(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_inputs_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("cohort.jsonl");
        std::fs::write(&input, b"{}\n").unwrap();

        let config = RunConfig::default();
        let mut manifest = RunManifest::new(vec!["gradibd".into(), "train".into()], &config);
        manifest.add_input(&input).unwrap();
        assert_eq!(manifest.seed, config.train.seed);
        assert_eq!(manifest.tool_version, crate::VERSION);
        manifest.verify_inputs().unwrap();

        manifest.clone().finish_and_save(dir.path()).unwrap();
        let loaded = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.command_line, manifest.command_line);
        assert_eq!(loaded.config_text, manifest.config_text);
        assert_eq!(loaded.input_hashes, manifest.input_hashes);
        assert!(!loaded.finished_at.is_empty());
    }

    #[test]
    fn config_text_reparses_to_the_same_config() {
        let mut config = RunConfig::default();
        config.set("seed", "123").unwrap();
        config.set("d_node", "16").unwrap();
        let manifest = RunManifest::new(vec!["gradibd".into()], &config);
        let reparsed = RunConfig::parse(&manifest.config_text).unwrap();
        assert_eq!(reparsed, config);
    }

    #[test]
    fn verify_catches_modified_input() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("cohort.jsonl");
        std::fs::write(&input, b"original").unwrap();

        let mut manifest = RunManifest::new(vec![], &RunConfig::default());
        manifest.add_input(&input).unwrap();
        std::fs::write(&input, b"tampered").unwrap();
        assert!(matches!(
            manifest.verify_inputs(),
            Err(ManifestError::HashMismatch { .. })
        ));
    }

    #[test]
    fn known_hash_value() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("empty");
        std::fs::write(&input, b"").unwrap();
        assert_eq!(
            sha256_file(&input).unwrap(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
