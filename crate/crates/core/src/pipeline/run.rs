use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::aggregate::reality_check;
use crate::error::{Error, Result};
use crate::model::{FactSet, NliMatrix, RealityScore};

use super::Label;

/// Everything produced for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub image_id: String,
    pub image_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    pub fact_set: FactSet,
    pub matrix: NliMatrix,
    /// Keyed by `method@weights`, see [`crate::model::score_key`].
    pub scores: BTreeMap<String, RealityScore>,
    pub lvlm_model_id: String,
    pub nli_model_id: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunRecord {
    /// Recomputes every stored score from the matrix and compares exactly.
    pub fn verify_scores(&self) -> Result<()> {
        for (key, stored) in &self.scores {
            let fresh =
                reality_check(&self.image_id, &self.matrix, &stored.weights, stored.method)?;
            if &fresh != stored || stored.key() != *key {
                return Err(Error::InvalidInput(format!(
                    "score `{key}` of `{}` does not match its matrix",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    /// Copy with timestamps zeroed, for comparing runs.
    pub fn without_timestamps(&self) -> Self {
        let epoch = DateTime::<Utc>::UNIX_EPOCH;
        Self {
            started_at: epoch,
            finished_at: epoch,
            ..self.clone()
        }
    }
}

/// Appends run records to `<dir>/run-<run_id>-<config_digest>.jsonl`.
pub struct RunStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl RunStore {
    pub fn create(dir: &Path, run_id: &str, config_digest: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("run-{run_id}-{config_digest}.jsonl"));
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &RunRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(line.as_bytes())?;
        file.flush()?;
        Ok(())
    }
}

/// Reads every `run-*.jsonl` file under `dir`, in file-name order.
pub fn load_run_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Input {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run-") && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    let mut records = Vec::new();
    for path in files {
        for (k, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Input {
                path: path.clone(),
                message: format!("line {}: {e}", k + 1),
            })?);
        }
    }
    Ok(records)
}
