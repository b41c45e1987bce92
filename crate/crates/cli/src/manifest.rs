//! Per-stage manifests. Each records the config hash, the seeds used and the
//! SHA-256 of every file the stage read or wrote; inputs include upstream
//! manifests, which makes the set a hash chain that `verify_chain` can walk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plab::LabError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// Named sub-seeds this stage drew from.
    pub seeds: BTreeMap<String, u64>,
    /// Relative path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Stage-specific facts worth keeping (counts, k, gate decision, …).
    pub info: BTreeMap<String, serde_json::Value>,
}

pub fn hash_file(path: &Path) -> Result<String, LabError> {
    let bytes = std::fs::read(path).map_err(|e| missing(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn missing(path: &Path, e: std::io::Error) -> LabError {
    if e.kind() == std::io::ErrorKind::NotFound {
        LabError::MissingArtifact(path.display().to_string())
    } else {
        LabError::IoFailure {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

pub fn manifest_path(out: &Path, stage: &str) -> PathBuf {
    out.join(MANIFEST_DIR).join(format!("{stage}.json"))
}

pub fn manifest_rel(stage: &str) -> String {
    format!("{MANIFEST_DIR}/{stage}.json")
}

impl Manifest {
    pub fn new(stage: &str, cfg: &RunConfig) -> Self {
        Manifest {
            stage: stage.to_string(),
            config_hash: cfg.hash(),
            master_seed: cfg.seed,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            info: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> u64 {
        self.seeds.insert(name.to_string(), value);
        value
    }

    pub fn input(&mut self, out: &Path, rel: &str) -> Result<(), LabError> {
        let h = hash_file(&out.join(rel))?;
        self.inputs.insert(rel.to_string(), h);
        Ok(())
    }

    /// Records the upstream stage's manifest as an input.
    pub fn upstream(&mut self, out: &Path, stage: &str) -> Result<(), LabError> {
        self.input(out, &manifest_rel(stage))
    }

    pub fn output(&mut self, out: &Path, rel: &str) -> Result<(), LabError> {
        let h = hash_file(&out.join(rel))?;
        self.outputs.insert(rel.to_string(), h);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.info
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf, LabError> {
        let path = manifest_path(out, &self.stage);
        std::fs::create_dir_all(path.parent().expect("has parent"))
            .map_err(|e| LabError::IoFailure {
                path: path.clone(),
                source: e,
            })?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| LabError::IoFailure {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }

    pub fn load(out: &Path, stage: &str) -> Result<Self, LabError> {
        let path = manifest_path(out, stage);
        let text = std::fs::read_to_string(&path).map_err(|e| missing(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Re-hashes every file recorded by `stage` and, recursively, by the stages
/// it consumed. Also checks that all of them ran under `config_hash`.
pub fn verify_chain(out: &Path, stage: &str, config_hash: &str) -> Result<(), LabError> {
    let mut seen = std::collections::BTreeSet::new();
    verify_inner(out, stage, config_hash, &mut seen)
}

fn verify_inner(
    out: &Path,
    stage: &str,
    config_hash: &str,
    seen: &mut std::collections::BTreeSet<String>,
) -> Result<(), LabError> {
    if !seen.insert(stage.to_string()) {
        return Ok(());
    }
    let m = Manifest::load(out, stage)?;
    if m.config_hash != config_hash {
        return Err(LabError::MissingArtifact(format!(
            "stage {stage} was produced under a different config"
        )));
    }
    for (rel, want) in m.inputs.iter().chain(&m.outputs) {
        let got = hash_file(&out.join(rel))?;
        if &got != want {
            return Err(LabError::MissingArtifact(format!(
                "{rel} changed since stage {stage} recorded it"
            )));
        }
    }
    for rel in m.inputs.keys() {
        if let Some(up) = rel
            .strip_prefix(&format!("{MANIFEST_DIR}/"))
            .and_then(|r| r.strip_suffix(".json"))
        {
            verify_inner(out, up, config_hash, seen)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (tempfile::TempDir, RunConfig) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        (dir, cfg)
    }

    #[test]
    fn chain_verifies_and_detects_tampering() {
        let (dir, cfg) = setup();
        let out = dir.path();
        std::fs::write(out.join("a.txt"), "alpha").unwrap();
        let mut first = Manifest::new("first", &cfg);
        first.output(out, "a.txt").unwrap();
        first.write(out).unwrap();

        std::fs::write(out.join("b.txt"), "beta").unwrap();
        let mut second = Manifest::new("second", &cfg);
        second.upstream(out, "first").unwrap();
        second.input(out, "a.txt").unwrap();
        second.output(out, "b.txt").unwrap();
        second.write(out).unwrap();

        verify_chain(out, "second", &cfg.hash()).unwrap();
        std::fs::write(out.join("a.txt"), "ALPHA").unwrap();
        let err = verify_chain(out, "second", &cfg.hash()).unwrap_err();
        assert!(matches!(err, LabError::MissingArtifact(_)), "{err}");
    }

    #[test]
    fn missing_upstream_is_a_missing_artifact() {
        let (dir, cfg) = setup();
        assert!(matches!(
            Manifest::load(dir.path(), "nope"),
            Err(LabError::MissingArtifact(_))
        ));
        assert!(matches!(
            verify_chain(dir.path(), "nope", &cfg.hash()),
            Err(LabError::MissingArtifact(_))
        ));
    }

    #[test]
    fn foreign_config_breaks_the_chain() {
        let (dir, cfg) = setup();
        Manifest::new("s", &cfg).write(dir.path()).unwrap();
        assert!(verify_chain(dir.path(), "s", "other").is_err());
    }
}
