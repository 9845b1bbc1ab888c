//! Versioned artifact persistence with content hashing.
//!
//! Every artifact embeds the config hash that produced it; loaders refuse to
//! mix artifacts from differing hashes unless forced. The report store takes
//! keyed appends: duplicate keys with identical payloads collapse to one
//! row, duplicate keys with differing payloads are collisions.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::PromptInstance;
use crate::error::{FvError, Result};

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Hex SHA-256 of a value's canonical JSON encoding.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

/// Hash of a prompt set: rendered text plus target, in order.
pub fn prompt_set_hash(prompts: &[PromptInstance]) -> String {
    let mut hasher = Sha256::new();
    for p in prompts {
        hasher.update(p.rendered_text.as_bytes());
        hasher.update([0u8]);
        hasher.update(p.target.as_bytes());
        hasher.update([0u8]);
    }
    format!("{:x}", hasher.finalize())
}

/// A persisted pipeline artifact with its provenance envelope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord<T> {
    pub schema_version: u32,
    pub model_id: String,
    pub task_id: String,
    /// Cell label, e.g. `demo/shuffled_demo` or `instruction_short/real_text`.
    pub condition: String,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the prompt set behind this artifact.
    pub prompt_set_hash: String,
    pub payload: T,
}

impl<T: Serialize + DeserializeOwned> ArtifactRecord<T> {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Reads one artifact, refusing a config-hash mismatch unless `force`.
    pub fn read(path: &Path, expected_config_hash: &str, force: bool) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let record: Self = serde_json::from_str(raw.trim()).map_err(|e| {
            FvError::Store(format!("bad artifact {}: {e}", path.display()))
        })?;
        if record.schema_version != ARTIFACT_SCHEMA_VERSION {
            return Err(FvError::Store(format!(
                "artifact {} has schema v{}, expected v{ARTIFACT_SCHEMA_VERSION}",
                path.display(),
                record.schema_version
            )));
        }
        if record.config_hash != expected_config_hash && !force {
            return Err(FvError::HashMismatch {
                found: record.config_hash,
                expected: expected_config_hash.to_string(),
            });
        }
        Ok(record)
    }
}

/// Append-only JSON-lines store of keyed rows.
pub struct KeyedStore {
    path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KeyedRow<T> {
    key: String,
    config_hash: String,
    payload: T,
}

impl KeyedStore {
    pub fn new(path: PathBuf) -> Self {
        Self { path }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, key: &str, config_hash: &str, payload: &T) -> Result<()> {
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        let row = KeyedRow {
            key: key.to_string(),
            config_hash: config_hash.to_string(),
            payload,
        };
        writeln!(file, "{}", serde_json::to_string(&row)?)?;
        Ok(())
    }

    /// Loads rows, collapsing duplicate keys. Identical payloads collapse to
    /// the last write; differing payloads under one key are a collision.
    pub fn load<T: DeserializeOwned + Serialize>(
        &self,
        expected_config_hash: &str,
        force: bool,
    ) -> Result<Vec<(String, T)>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let raw = std::fs::read_to_string(&self.path)?;
        let mut seen: BTreeMap<String, (String, T)> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for line in raw.lines().filter(|l| !l.trim().is_empty()) {
            let row: KeyedRow<T> = serde_json::from_str(line)
                .map_err(|e| FvError::Store(format!("bad row in {}: {e}", self.path.display())))?;
            if row.config_hash != expected_config_hash && !force {
                return Err(FvError::HashMismatch {
                    found: row.config_hash,
                    expected: expected_config_hash.to_string(),
                });
            }
            let fingerprint = content_hash(&row.payload)?;
            match seen.get(&row.key) {
                Some((existing, _)) if *existing != fingerprint => {
                    return Err(FvError::Collision { key: row.key });
                }
                Some(_) => {
                    // identical payload rewritten: last write wins
                    seen.insert(row.key.clone(), (fingerprint, row.payload));
                }
                None => {
                    order.push(row.key.clone());
                    seen.insert(row.key.clone(), (fingerprint, row.payload));
                }
            }
        }
        Ok(order
            .into_iter()
            .map(|key| {
                let (_, payload) = seen.remove(&key).expect("key recorded");
                (key, payload)
            })
            .collect())
    }
}

/// The run manifest: everything that identifies one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_ids: Vec<String>,
    pub task_paths: Vec<String>,
    pub regimes: Vec<String>,
    pub fv_files: Vec<String>,
    pub layers: Vec<usize>,
    pub seed: u64,
    pub config_hash: String,
}

impl RunManifest {
    pub fn hash(&self) -> Result<String> {
        content_hash(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map_err(|e| FvError::Store(format!("bad manifest {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn artifact_round_trip_checks_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cell.jsonl");
        let record = ArtifactRecord {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            model_id: "m".into(),
            task_id: "t".into(),
            condition: "demo/shuffled_demo".into(),
            seed: 7,
            config_hash: "cfg1".into(),
            prompt_set_hash: "p".into(),
            payload: vec![1.0f64, 2.0],
        };
        record.write(&path).unwrap();
        let loaded: ArtifactRecord<Vec<f64>> = ArtifactRecord::read(&path, "cfg1", false).unwrap();
        assert_eq!(loaded.payload, vec![1.0, 2.0]);
        let err = ArtifactRecord::<Vec<f64>>::read(&path, "cfg2", false).unwrap_err();
        assert!(matches!(err, FvError::HashMismatch { .. }));
        // force overrides the refusal
        assert!(ArtifactRecord::<Vec<f64>>::read(&path, "cfg2", true).is_ok());
    }

    #[test]
    fn keyed_store_collapses_identical_and_detects_collisions() {
        let dir = tempfile::tempdir().unwrap();
        let store = KeyedStore::new(dir.path().join("reports.jsonl"));
        store.append("k1", "cfg", &1.5f64).unwrap();
        store.append("k1", "cfg", &1.5f64).unwrap();
        store.append("k2", "cfg", &2.5f64).unwrap();
        let rows: Vec<(String, f64)> = store.load("cfg", false).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], ("k1".to_string(), 1.5));

        store.append("k1", "cfg", &9.9f64).unwrap();
        let err = store.load::<f64>("cfg", false).unwrap_err();
        assert!(matches!(err, FvError::Collision { .. }));
    }

    #[test]
    fn content_hash_is_stable() {
        let a = content_hash(&("x", 1.25f64)).unwrap();
        let b = content_hash(&("x", 1.25f64)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, content_hash(&("x", 1.26f64)).unwrap());
    }
}
