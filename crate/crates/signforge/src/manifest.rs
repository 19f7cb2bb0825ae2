//! Run manifests: what a command ran, with which inputs, and what it
//! wrote.
//!
//! Every CLI command creates one run directory holding its artifacts
//! plus a `manifest.json` describing them. Inputs and emitted artifacts
//! are listed with SHA-256 hashes, so a finished directory can be
//! audited against what the run actually produced. A run directory
//! belongs to exactly one run: writing a second manifest into it is an
//! error rather than an overwrite.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// File name of the manifest inside a run directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Hex SHA-256 of a file's contents.
pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// A file with its content hash at record time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// One command's record: resolved configuration, seeds, backend
/// identifiers, consumed inputs, and emitted artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The fully resolved configuration the run used, defaults included.
    pub config: serde_json::Value,
    /// Every named seed the run consumed.
    pub seeds: BTreeMap<String, u64>,
    /// Identifiers of the diffusion, detector, and embedding backends.
    pub backends: Vec<String>,
    pub duration_seconds: f64,
    /// Input files outside the run directory, recorded as given.
    pub inputs: Vec<FileRecord>,
    /// Emitted files, recorded relative to the run directory.
    pub artifacts: Vec<FileRecord>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            backends: Vec::new(),
            duration_seconds: 0.0,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: impl Into<String>, value: u64) -> &mut Self {
        self.seeds.insert(name.into(), value);
        self
    }

    /// Hashes an input file and lists it under the path it was given as.
    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let sha256 = hash_file(path)?;
        self.inputs.push(FileRecord { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Hashes `run_dir/name` and lists it under its relative name.
    pub fn record_artifact(&mut self, run_dir: &Path, name: &str) -> Result<()> {
        let sha256 = hash_file(&run_dir.join(name))?;
        self.artifacts.push(FileRecord { path: name.to_string(), sha256 });
        Ok(())
    }

    /// Writes `manifest.json` into the run directory. Fails if one is
    /// already there: run directories are append-only, one run each.
    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join(MANIFEST_FILE);
        if path.exists() {
            return Err(Error::ManifestAudit(format!(
                "{} already holds a manifest; run directories are not reused",
                run_dir.display()
            )));
        }
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Loads a run directory's manifest and verifies that every listed
/// artifact still hashes to its recorded value.
pub fn audit_run_dir(run_dir: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::read(&run_dir.join(MANIFEST_FILE))?;
    let mut failures = Vec::new();
    for record in &manifest.artifacts {
        let path = run_dir.join(&record.path);
        match hash_file(&path) {
            Ok(hash) if hash == record.sha256 => {}
            Ok(_) => failures.push(format!("{} does not match its recorded hash", record.path)),
            Err(_) => failures.push(format!("{} is missing", record.path)),
        }
    }
    if failures.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::ManifestAudit(failures.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_manifest(dir: &Path) -> RunManifest {
        fs::write(dir.join("a.txt"), b"alpha").unwrap();
        fs::write(dir.join("b.txt"), b"beta").unwrap();
        let mut m = RunManifest::new("generate", serde_json::json!({"seed": 7}));
        m.seed("attack", 7);
        m.backends.push("toy-diffusion".into());
        m.record_artifact(dir, "a.txt").unwrap();
        m.record_artifact(dir, "b.txt").unwrap();
        m
    }

    #[test]
    fn empty_hash_matches_known_vector() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        let path = m.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(&path).unwrap(), m);
    }

    #[test]
    fn second_write_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        m.write(dir.path()).unwrap();
        assert!(matches!(m.write(dir.path()), Err(Error::ManifestAudit(_))));
    }

    #[test]
    fn audit_accepts_intact_directory() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_manifest(dir.path());
        m.write(dir.path()).unwrap();
        let audited = audit_run_dir(dir.path()).unwrap();
        assert_eq!(audited, m);
    }

    #[test]
    fn audit_flags_tampered_artifact() {
        let dir = tempfile::tempdir().unwrap();
        sample_manifest(dir.path()).write(dir.path()).unwrap();
        fs::write(dir.path().join("a.txt"), b"tampered").unwrap();
        let err = audit_run_dir(dir.path()).unwrap_err();
        match err {
            Error::ManifestAudit(msg) => assert!(msg.contains("a.txt"), "{msg}"),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn audit_flags_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        sample_manifest(dir.path()).write(dir.path()).unwrap();
        fs::remove_file(dir.path().join("b.txt")).unwrap();
        let err = audit_run_dir(dir.path()).unwrap_err();
        match err {
            Error::ManifestAudit(msg) => assert!(msg.contains("b.txt is missing"), "{msg}"),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn recording_missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("generate", serde_json::Value::Null);
        assert!(matches!(m.record_artifact(dir.path(), "absent.png"), Err(Error::Io(_))));
    }
}
