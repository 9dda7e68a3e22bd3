//! Append-only JSON Lines key/value store.
//!
//! Every line is `{"key": <hex digest>, "value": <record>}`. On open the file
//! is replayed into an in-memory index in which later lines win. Lines that
//! do not parse are reported and skipped. The readable lines are still served.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FACTS_FILE: &str = "facts.jsonl";
pub const NLI_FILE: &str = "nli.jsonl";

#[derive(Serialize, Deserialize)]
struct Line {
    key: String,
    value: Value,
}

#[derive(Serialize)]
struct LineRef<'a> {
    key: &'a str,
    value: &'a Value,
}

pub struct JsonlStore {
    path: PathBuf,
    index: RwLock<HashMap<String, Value>>,
    writer: Mutex<File>,
    problems: Vec<Error>,
}

impl JsonlStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut index = HashMap::new();
        let mut problems = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (k, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Line>(&line) {
                    Ok(entry) => {
                        index.insert(entry.key, entry.value);
                    }
                    Err(e) => {
                        let problem = Error::CacheIntegrity {
                            path: path.clone(),
                            line: Some(k + 1),
                            key: None,
                            message: e.to_string(),
                        };
                        log::warn!("{problem}");
                        problems.push(problem);
                    }
                }
            }
        }
        let writer = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            index: RwLock::new(index),
            writer: Mutex::new(writer),
            problems,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Lines skipped on open because they failed to parse.
    pub fn problems(&self) -> &[Error] {
        &self.problems
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.index.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: &str, value: Value) -> Result<()> {
        let mut line = serde_json::to_string(&LineRef { key, value: &value })?;
        line.push('\n');
        // The index is updated under the writer lock so readers never see a
        // value that is not yet on disk.
        let mut writer = self.writer.lock().unwrap();
        writer.write_all(line.as_bytes())?;
        writer.flush()?;
        self.index.write().unwrap().insert(key.to_string(), value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Typed lookup; a stored value of the wrong shape is an integrity error.
    pub fn get_typed<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(value) => {
                serde_json::from_value(value)
                    .map(Some)
                    .map_err(|e| Error::CacheIntegrity {
                        path: self.path.clone(),
                        line: None,
                        key: Some(key.to_string()),
                        message: e.to_string(),
                    })
            }
        }
    }

    pub fn integrity_error(&self, key: &str, message: impl Into<String>) -> Error {
        Error::CacheIntegrity {
            path: self.path.clone(),
            line: None,
            key: Some(key.to_string()),
            message: message.into(),
        }
    }
}

/// Fact and NLI stores living side by side in one directory.
pub struct Cache {
    pub facts: JsonlStore,
    pub nli: JsonlStore,
}

impl Cache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            facts: JsonlStore::open(dir.join(FACTS_FILE))?,
            nli: JsonlStore::open(dir.join(NLI_FILE))?,
        })
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `key`.
pub fn digest_key<T: Serialize>(key: &T) -> String {
    let bytes = serde_json::to_vec(key).expect("cache keys serialize");
    hex::encode(Sha256::digest(bytes))
}
