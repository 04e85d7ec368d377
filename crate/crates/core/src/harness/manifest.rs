//! JSON run manifests: enough to rebuild every output row.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetHandle;
use crate::harness::table::CSV_SCHEMA;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub name: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub train_sha256: String,
    pub test_sha256: String,
}

impl DatasetFingerprint {
    pub fn of(data: &DatasetHandle) -> Self {
        DatasetFingerprint {
            name: data.name.clone(),
            train_samples: data.train.len(),
            test_samples: data.test.len(),
            dim: data.dim(),
            classes: data.classes(),
            train_sha256: data.train.fingerprint(),
            test_sha256: data.test.fingerprint(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub run_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub csv_schema: String,
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub dataset: DatasetFingerprint,
    /// Which epochs appear in the CSV.
    pub log_policy: String,
    pub rng: String,
    /// Git-style blob hash over the config and dataset fingerprints.
    pub input_hash: String,
    #[serde(default)]
    pub failures: Vec<CellFailure>,
}

/// SHA-256 of `"blob <len>\0" ++ bytes`, hex-encoded.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize, data: &DatasetHandle, log_policy: String) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let dataset = DatasetFingerprint::of(data);
        let mut hashed = serde_json::to_vec(&config)?;
        hashed.extend_from_slice(dataset.train_sha256.as_bytes());
        hashed.extend_from_slice(dataset.test_sha256.as_bytes());
        Ok(Manifest {
            format_version: MANIFEST_VERSION,
            csv_schema: CSV_SCHEMA.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            dataset,
            log_policy,
            rng: crate::math::RngStream::ALGORITHM.into(),
            input_hash: blob_hash(&hashed),
            failures: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin` under sha256 object format
        assert_eq!(blob_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }
}
