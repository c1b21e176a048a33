//! Output bookkeeping: every file goes through `Outputs` so the run manifest
//! can list it with its digest.

use std::path::{Path, PathBuf};

use edge_admission::artifacts::{to_csv_bytes, to_json_bytes, write_atomic};
use edge_admission::config::ExperimentConfig;
use edge_admission::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
}

/// Enough to rerun the command and check every output byte for byte.
/// Output paths are relative to the output directory; no timestamps.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    library_version: &'static str,
    command: &'a str,
    config_sha256: String,
    seeds: &'a [u64],
    config: &'a ExperimentConfig,
    outputs: Vec<OutputEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Outputs {
    root: PathBuf,
    files: Vec<OutputEntry>,
}

impl Outputs {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        write_atomic(&path, bytes)?;
        self.files.push(OutputEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        self.bytes(rel, &to_json_bytes(value)?)
    }

    pub fn csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<PathBuf> {
        self.bytes(rel, &to_csv_bytes(rows)?)
    }

    /// Writes `manifest_<command>.json` next to the outputs.
    pub fn finish(self, command: &str, config: &ExperimentConfig) -> Result<PathBuf> {
        let config_sha256 = sha256_hex(config.to_canonical_json().as_bytes());
        let manifest = Manifest {
            tool: "edge-admission",
            version: env!("CARGO_PKG_VERSION"),
            library_version: edge_admission::VERSION,
            command,
            config_sha256,
            seeds: &config.seeds,
            config,
            outputs: self.files,
        };
        let path = self.root.join(format!("manifest_{command}.json"));
        write_atomic(&path, &to_json_bytes(&manifest)?)?;
        Ok(path)
    }
}
