//! Run manifest: one entry per attack batch with the queries it spent.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub total_queries: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub command: String,
    pub method: String,
    pub t: String,
    pub p: f64,
    pub samples: usize,
    pub queries: u64,
    pub wall_time_seconds: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Core(pialab_core::Error::Format {
                path: path.to_path_buf(),
                field: "manifest".into(),
                reason: e.to_string(),
            })
        })
    }

    /// Appends `entries` to the manifest at `path`, creating it if needed.
    pub fn append(path: &Path, entries: Vec<ManifestEntry>) -> Result<Self, CliError> {
        let mut m = Self::load(path)?;
        m.entries.extend(entries);
        m.total_queries = m.entries.iter().map(|e| e.queries).sum();
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))?;
        Ok(m)
    }

    /// Queries summed over entries for `method`.
    pub fn queries_for(&self, method: &str) -> u64 {
        self.entries.iter().filter(|e| e.method == method).map(|e| e.queries).sum()
    }
}
