use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::file_sha256;
use crate::error::{PolarError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandEcho {
    pub argv: Vec<String>,
    pub unix_time: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: PathBuf,
    pub sha256: String,
    /// Encoder fingerprint the artifact belongs to, when it has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

/// Run log shared by every command: the seed, each invocation and a hash of
/// every artifact written. Inputs listed here are re-hashed before use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    #[serde(default)]
    pub commands: Vec<CommandEcho>,
    /// Role (`world`, `encoder`, `delta/<concept>`, ...) → artifact.
    #[serde(default)]
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl RunManifest {
    pub fn new(seed: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            commands: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Reads `path`, or returns `None` if it does not exist.
    pub fn load(path: &Path) -> Result<Option<Self>> {
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| PolarError::Corrupt {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(PolarError::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| PolarError::io(path, e))
    }

    pub fn record(&mut self, role: impl Into<String>, path: &Path, fingerprint: Option<String>) -> Result<()> {
        let record = ArtifactRecord {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
            fingerprint,
        };
        self.artifacts.insert(role.into(), record);
        Ok(())
    }

    /// Errors if `path` was recorded and its contents changed since.
    pub fn verify(&self, path: &Path) -> Result<()> {
        for rec in self.artifacts.values().filter(|r| same_file(&r.path, path)) {
            let found = file_sha256(path)?;
            if found != rec.sha256 {
                return Err(PolarError::Stale {
                    path: path.to_path_buf(),
                    recorded: rec.sha256.clone(),
                    found,
                });
            }
        }
        Ok(())
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edited_artifact_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.bin");
        std::fs::write(&file, b"one").unwrap();
        let mut m = RunManifest::new(4);
        m.record("world", &file, None).unwrap();
        m.verify(&file).unwrap();
        m.verify(&dir.path().join("unrecorded")).unwrap();

        let mpath = dir.path().join("manifest.json");
        m.save(&mpath).unwrap();
        assert_eq!(RunManifest::load(&mpath).unwrap().unwrap(), m);
        assert!(RunManifest::load(&dir.path().join("none.json")).unwrap().is_none());

        std::fs::write(&file, b"two").unwrap();
        let err = m.verify(&file).unwrap_err();
        assert_eq!(err.kind(), "stale_artifact");
    }
}
