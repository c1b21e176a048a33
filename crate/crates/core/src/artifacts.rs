//! Versioned JSON artifacts and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dp::{
    check_threshold_structure, check_value_monotone, DeterministicPolicy, DpSolution, PlanningKernel, QTable,
    ThresholdStructure, ThresholdViolation, ValueTable,
};
use crate::error::{Error, Result};
use crate::eval::Policy;
use crate::model::{ModelParams, State};

pub const SCHEMA_VERSION: u32 = 1;

/// Output of `solve`: the value function, action values, greedy policy and its structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpArtifact {
    pub schema_version: u32,
    pub lambda: f64,
    pub kernel: PlanningKernel,
    pub iterations: usize,
    pub residual: f64,
    pub initial_value: f64,
    pub v: ValueTable,
    pub q: QTable,
    pub policy: DeterministicPolicy,
    /// States where `V(x, ℓ + 1) < V(x, ℓ)`.
    pub value_violations: Vec<State>,
    /// Per-row thresholds when every row is a threshold rule.
    pub thresholds: Option<ThresholdStructure>,
    pub threshold_violations: Vec<ThresholdViolation>,
}

impl DpArtifact {
    pub fn from_solution(sol: &DpSolution, x0: State) -> Self {
        let (thresholds, threshold_violations) = match check_threshold_structure(&sol.policy) {
            Ok(t) => (Some(t), Vec::new()),
            Err(v) => (None, v),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            lambda: sol.lambda,
            kernel: sol.kernel,
            iterations: sol.iterations,
            residual: sol.residual,
            initial_value: *sol.v.at(x0),
            v: sol.v.clone(),
            q: sol.q.clone(),
            policy: sol.policy.clone(),
            value_violations: check_value_monotone(&sol.v),
            thresholds,
            threshold_violations,
        }
    }
}

/// A trained or fixed policy with enough metadata to evaluate it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArtifact {
    pub schema_version: u32,
    pub learner: String,
    pub seed: u64,
    pub steps: u64,
    pub model: ModelParams,
    pub policy: Policy,
    /// Critic table, when the learner keeps one.
    pub q: Option<QTable>,
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp"))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_path(path);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        context: "serialize".into(),
        source,
    })?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

pub fn to_csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::io("csv buffer", e.into_error()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &to_csv_bytes(rows)?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file).deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// CSV with a header given explicitly, for rows whose columns depend on the run.
pub fn write_csv_records(path: &Path, header: &[String], records: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{value_iteration, ViOptions};
    use crate::model::Model;

    #[test]
    fn dp_artifact_round_trip() {
        let model = Model::reference();
        let sol = value_iteration(6.0, &model, &ViOptions::default()).unwrap();
        let art = DpArtifact::from_solution(&sol, State::new(0, 0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/dp.json");
        write_json(&path, &art).unwrap();
        let back: DpArtifact = read_json(&path).unwrap();
        assert_eq!(back, art);
        assert!(!temp_path(&path).exists());
    }

    #[test]
    fn policy_artifact_is_kind_tagged() {
        let art = PolicyArtifact {
            schema_version: SCHEMA_VERSION,
            learner: "baseline".into(),
            seed: 0,
            steps: 0,
            model: ModelParams::default(),
            policy: Policy::Baseline {
                baseline: crate::learners::BaselinePolicy::default(),
            },
            q: None,
        };
        let json = String::from_utf8(to_json_bytes(&art).unwrap()).unwrap();
        assert!(json.contains("\"kind\": \"baseline\""));
        let back: PolicyArtifact = serde_json::from_str(&json).unwrap();
        assert_eq!(back, art);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_json::<DpArtifact>(Path::new("/nonexistent/dp.json")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/dp.json"));
    }
}
