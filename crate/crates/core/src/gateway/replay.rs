use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{BackendConfig, FactBackend, FactCandidates, ImageInput, NliBackend, RawNliOutput};
use crate::error::{Error, Result};
use crate::model::{GenerationMode, GenerationParams};

/// One line of a fact replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactReplayRecord {
    pub image_sha256: String,
    #[serde(flatten)]
    pub params: GenerationParams,
    pub facts: Vec<String>,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_mode: Option<GenerationMode>,
}

/// One line of an NLI replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliReplayRecord {
    pub premise: String,
    pub hypothesis: String,
    pub model_id: String,
    pub labels: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(default)]
    pub normalized: bool,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(k, line)| {
            serde_json::from_str(line).map_err(|e| Error::Input {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", k + 1),
            })
        })
        .collect()
}

/// Picks the model identity served by a replay file.
fn resolve_model(config: &BackendConfig, path: &Path, models: BTreeSet<&str>) -> Result<String> {
    if let Some(id) = &config.model_id {
        return Ok(id.clone());
    }
    let mut iter = models.into_iter();
    match (iter.next(), iter.next()) {
        (Some(only), None) => Ok(only.to_string()),
        (None, _) => Ok("replay".to_string()),
        (Some(_), Some(_)) => Err(Error::InvalidConfig(format!(
            "replay file {} holds several models; set model_id",
            path.display()
        ))),
    }
}

fn replay_path(config: &BackendConfig) -> Result<&Path> {
    config
        .replay_path
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("replay backend requires replay_path".into()))
}

pub(crate) fn fact_key(image_sha256: &str, params: &GenerationParams) -> String {
    let params = serde_json::to_string(params).expect("params serialize");
    format!("{image_sha256}\n{params}")
}

pub struct ReplayFactBackend {
    model_id: String,
    records: HashMap<String, FactReplayRecord>,
}

impl ReplayFactBackend {
    pub fn open(config: &BackendConfig) -> Result<Self> {
        let path = replay_path(config)?;
        Self::from_records(config, path, read_jsonl(path)?)
    }

    fn from_records(
        config: &BackendConfig,
        path: &Path,
        records: Vec<FactReplayRecord>,
    ) -> Result<Self> {
        let model_id = resolve_model(
            config,
            path,
            records.iter().map(|r| r.model_id.as_str()).collect(),
        )?;
        let records = records
            .into_iter()
            .filter(|r| r.model_id == model_id)
            .map(|r| (fact_key(&r.image_sha256, &r.params), r))
            .collect();
        Ok(Self { model_id, records })
    }
}

impl FactBackend for ReplayFactBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, image: &ImageInput, params: &GenerationParams) -> Result<FactCandidates> {
        let sha = image.sha256();
        let record = self
            .records
            .get(&fact_key(&sha, params))
            .ok_or_else(|| Error::ReplayMiss(format!("no facts recorded for image {sha}")))?;
        Ok(FactCandidates {
            facts: record.facts.clone(),
            model_id: record.model_id.clone(),
            generation_mode: record.generation_mode.unwrap_or_default(),
        })
    }
}

pub struct ReplayNliBackend {
    model_id: String,
    records: HashMap<(String, String), NliReplayRecord>,
}

impl ReplayNliBackend {
    pub fn open(config: &BackendConfig) -> Result<Self> {
        let path = replay_path(config)?;
        let records: Vec<NliReplayRecord> = read_jsonl(path)?;
        let model_id = resolve_model(
            config,
            path,
            records.iter().map(|r| r.model_id.as_str()).collect(),
        )?;
        let records = records
            .into_iter()
            .filter(|r| r.model_id == model_id)
            .map(|r| ((r.premise.clone(), r.hypothesis.clone()), r))
            .collect();
        Ok(Self { model_id, records })
    }
}

impl NliBackend for ReplayNliBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn score(&self, premise: &str, hypothesis: &str) -> Result<RawNliOutput> {
        let record = self
            .records
            .get(&(premise.to_string(), hypothesis.to_string()))
            .ok_or_else(|| {
                Error::ReplayMiss(format!(
                    "no NLI scores recorded for `{premise}` → `{hypothesis}`"
                ))
            })?;
        Ok(RawNliOutput {
            labels: record.labels.clone(),
            values: record.scores.clone(),
            normalized: record.normalized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines<T: Serialize>(records: &[T]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for r in records {
            writeln!(file, "{}", serde_json::to_string(r).unwrap()).unwrap();
        }
        file
    }

    fn nli_record(model: &str, ent: f64) -> NliReplayRecord {
        NliReplayRecord {
            premise: "p".into(),
            hypothesis: "h".into(),
            model_id: model.into(),
            labels: vec![
                "entailment".into(),
                "contradiction".into(),
                "neutral".into(),
            ],
            scores: vec![ent, 1.0 - ent, 0.0],
            normalized: true,
        }
    }

    #[test]
    fn fact_replay_is_keyed_by_digest_and_params() {
        let image = ImageInput::new(b"pixels".to_vec(), "image/png");
        let params = GenerationParams::default();
        let record = FactReplayRecord {
            image_sha256: image.sha256(),
            params: params.clone(),
            facts: (0..5).map(|i| format!("fact {i}")).collect(),
            model_id: "llava".into(),
            generation_mode: None,
        };
        let file = write_lines(&[record]);
        let backend = ReplayFactBackend::open(&BackendConfig::replay(file.path())).unwrap();
        assert_eq!(backend.model_id(), "llava");
        let out = backend.generate(&image, &params).unwrap();
        assert_eq!(out.facts[4], "fact 4");

        let mut other = params.clone();
        other.diversity_penalty = 2.0;
        assert!(matches!(
            backend.generate(&image, &other),
            Err(Error::ReplayMiss(_))
        ));
        let unknown = ImageInput::new(b"other".to_vec(), "image/png");
        assert!(matches!(
            backend.generate(&unknown, &params),
            Err(Error::ReplayMiss(_))
        ));
    }

    #[test]
    fn nli_replay_model_selection() {
        let file = write_lines(&[nli_record("a", 0.9), nli_record("b", 0.1)]);
        assert!(matches!(
            ReplayNliBackend::open(&BackendConfig::replay(file.path())),
            Err(Error::InvalidConfig(_))
        ));
        let config = BackendConfig {
            model_id: Some("b".into()),
            ..BackendConfig::replay(file.path())
        };
        let backend = ReplayNliBackend::open(&config).unwrap();
        assert_eq!(backend.score("p", "h").unwrap().values, vec![0.1, 0.9, 0.0]);
        assert!(backend.score("h", "p").is_err());
    }

    #[test]
    fn malformed_replay_line_is_reported() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            file,
            "{}",
            serde_json::to_string(&nli_record("a", 0.5)).unwrap()
        )
        .unwrap();
        writeln!(file, "{{not json").unwrap();
        let err = ReplayNliBackend::open(&BackendConfig::replay(file.path()))
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
