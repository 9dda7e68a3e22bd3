//! Per-image orchestration: facts, then the NLI matrix, then scores.
//!
//! Backend responses are cached by content digest so that repeated runs,
//! interrupted batches and weight sweeps never re-query a backend for
//! something already seen.

mod cache;
mod run;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::aggregate::reality_check;
use crate::error::{Error, Result};
use crate::gateway::{
    build_nli_matrix_with, generate_facts, score_pair, FactBackend, ImageInput, NliBackend,
};
use crate::model::{
    FactSet, GenerationMode, GenerationParams, Method, NliMatrix, NliTriple, ScoreWeights,
};

pub use cache::{digest_key, Cache, JsonlStore, FACTS_FILE, NLI_FILE};
pub use run::{load_run_records, RunRecord, RunStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Weird,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    /// Expected digest; checked against the file when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default)]
    pub pair_id: Option<String>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            image_id: image_id.into(),
            path: path.into(),
            sha256: None,
            label: None,
            pair_id: None,
        }
    }

    /// Reads the image and returns it with its hex SHA-256.
    pub fn load(&self) -> Result<(ImageInput, String)> {
        let input = ImageInput::from_path(&self.path)?;
        let digest = input.sha256();
        if let Some(expected) = &self.sha256 {
            if !expected.eq_ignore_ascii_case(&digest) {
                return Err(Error::Input {
                    path: self.path.clone(),
                    message: format!("sha256 {digest} does not match manifest value {expected}"),
                });
            }
        }
        Ok((input, digest))
    }
}

/// Reads a JSON Lines manifest. Relative image paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut record: ImageRecord = serde_json::from_str(line).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", k + 1),
        })?;
        if record.path.is_relative() {
            record.path = base.join(&record.path);
        }
        if !seen.insert(record.image_id.clone()) {
            return Err(Error::Input {
                path: path.to_path_buf(),
                message: format!("duplicate image_id `{}`", record.image_id),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// One (method, weights) combination to score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub method: Method,
    pub weights: ScoreWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Serve hits from the cache, fetch and store misses.
    #[default]
    ReadWrite,
    /// Misses are errors; backends are never called.
    CacheOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub params: GenerationParams,
    pub specs: Vec<ScoreSpec>,
    pub concurrency: usize,
    pub cache_mode: CacheMode,
    pub fail_fast: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            params: GenerationParams::default(),
            specs: vec![ScoreSpec {
                method: Method::Clust,
                weights: ScoreWeights::default(),
            }],
            concurrency: 4,
            cache_mode: CacheMode::ReadWrite,
            fail_fast: false,
        }
    }
}

#[derive(Clone)]
pub struct Backends {
    pub facts: Arc<dyn FactBackend>,
    /// Only needed for scoring; fact generation runs without it.
    pub nli: Option<Arc<dyn NliBackend>>,
}

impl Backends {
    pub fn new(facts: Arc<dyn FactBackend>, nli: Arc<dyn NliBackend>) -> Self {
        Self {
            facts,
            nli: Some(nli),
        }
    }

    fn nli(&self) -> Result<&dyn NliBackend> {
        self.nli
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no NLI backend configured".into()))
    }

    fn nli_model_id(&self) -> &str {
        self.nli.as_deref().map_or("", |b| b.model_id())
    }
}

/// Backend calls and cache hits since the pipeline was built.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestStats {
    pub fact_requests: usize,
    pub nli_requests: usize,
    pub fact_cache_hits: usize,
    pub nli_cache_hits: usize,
}

#[derive(Default)]
struct Counters {
    fact_requests: AtomicUsize,
    nli_requests: AtomicUsize,
    fact_cache_hits: AtomicUsize,
    nli_cache_hits: AtomicUsize,
}

#[derive(Serialize, Deserialize)]
struct CachedFacts {
    facts: Vec<String>,
    model_id: String,
    generation_mode: GenerationMode,
}

#[derive(Debug)]
pub struct BatchFailure {
    pub index: usize,
    pub image_id: String,
    pub error: Error,
}

#[derive(Debug)]
pub struct BatchOutcome<T> {
    /// Successful results in manifest order.
    pub items: Vec<T>,
    pub failures: Vec<BatchFailure>,
    /// Images never attempted because an earlier failure stopped the batch.
    pub skipped: usize,
}

impl<T> BatchOutcome<T> {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.skipped == 0
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    backends: Backends,
    cache: Cache,
    runs: Option<RunStore>,
    counters: Counters,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, backends: Backends, cache: Cache) -> Result<Self> {
        config.params.validate()?;
        if config.specs.is_empty() {
            return Err(Error::InvalidConfig("no score methods requested".into()));
        }
        for spec in &config.specs {
            spec.weights.validate()?;
        }
        Ok(Self {
            config,
            backends,
            cache,
            runs: None,
            counters: Counters::default(),
        })
    }

    pub fn with_run_store(mut self, store: RunStore) -> Self {
        self.runs = Some(store);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run_store(&self) -> Option<&RunStore> {
        self.runs.as_ref()
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn stats(&self) -> RequestStats {
        let c = &self.counters;
        RequestStats {
            fact_requests: c.fact_requests.load(Ordering::SeqCst),
            nli_requests: c.nli_requests.load(Ordering::SeqCst),
            fact_cache_hits: c.fact_cache_hits.load(Ordering::SeqCst),
            nli_cache_hits: c.nli_cache_hits.load(Ordering::SeqCst),
        }
    }

    /// Short digest of everything that determines run outputs.
    pub fn config_digest(&self) -> String {
        let key = (
            &self.config.params,
            &self.config.specs,
            self.backends.facts.model_id(),
            self.backends.nli_model_id(),
        );
        digest_key(&key)[..16].to_string()
    }

    pub fn facts_key(&self, image_sha256: &str) -> String {
        digest_key(&(
            "facts",
            image_sha256,
            &self.config.params,
            self.backends.facts.model_id(),
        ))
    }

    pub fn nli_key(&self, premise: &str, hypothesis: &str) -> String {
        digest_key(&("nli", premise, hypothesis, self.backends.nli_model_id()))
    }

    /// Facts for one image, from cache or from the fact backend.
    pub fn facts_for(&self, image: &ImageRecord) -> Result<FactSet> {
        let (input, digest) = image.load()?;
        self.facts_for_input(&image.image_id, &input, &digest)
    }

    fn facts_for_input(&self, image_id: &str, input: &ImageInput, digest: &str) -> Result<FactSet> {
        let params = &self.config.params;
        let key = self.facts_key(digest);
        let store = &self.cache.facts;
        if let Some(cached) = store.get_typed::<CachedFacts>(&key)? {
            let mut set = FactSet::new(image_id, cached.facts, params.clone(), cached.model_id)
                .map_err(|e| store.integrity_error(&key, e.to_string()))?;
            if set.len() != params.num_facts {
                return Err(store.integrity_error(
                    &key,
                    format!("{} cached facts, expected {}", set.len(), params.num_facts),
                ));
            }
            set.generation_mode = cached.generation_mode;
            self.counters.fact_cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(set);
        }
        if self.config.cache_mode == CacheMode::CacheOnly {
            return Err(Error::CacheMiss { kind: "facts", key });
        }
        self.counters.fact_requests.fetch_add(1, Ordering::SeqCst);
        let set = generate_facts(image_id, input, params, self.backends.facts.as_ref())?;
        let value = CachedFacts {
            facts: set.facts.clone(),
            model_id: set.model_id.clone(),
            generation_mode: set.generation_mode,
        };
        store.put(&key, serde_json::to_value(value)?)?;
        Ok(set)
    }

    fn score_pair_cached(&self, premise: &str, hypothesis: &str) -> Result<NliTriple> {
        let key = self.nli_key(premise, hypothesis);
        let store = &self.cache.nli;
        if let Some(triple) = store.get_typed::<NliTriple>(&key)? {
            triple
                .validate()
                .map_err(|e| store.integrity_error(&key, e.to_string()))?;
            self.counters.nli_cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(triple);
        }
        if self.config.cache_mode == CacheMode::CacheOnly {
            return Err(Error::CacheMiss { kind: "nli", key });
        }
        self.counters.nli_requests.fetch_add(1, Ordering::SeqCst);
        let triple = score_pair(premise, hypothesis, self.backends.nli()?)?;
        store.put(&key, serde_json::to_value(triple)?)?;
        Ok(triple)
    }

    pub fn matrix_for(&self, facts: &FactSet) -> Result<NliMatrix> {
        build_nli_matrix_with(
            facts,
            self.backends.nli()?.model_id(),
            self.config.concurrency,
            |p, h| self.score_pair_cached(p, h),
        )
    }

    fn build_record(&self, image: &ImageRecord) -> Result<RunRecord> {
        let started_at = Utc::now();
        let (input, digest) = image.load()?;
        let fact_set = self.facts_for_input(&image.image_id, &input, &digest)?;
        let matrix = self.matrix_for(&fact_set)?;
        let mut scores = BTreeMap::new();
        for spec in &self.config.specs {
            let score = reality_check(&image.image_id, &matrix, &spec.weights, spec.method)?;
            scores.insert(score.key(), score);
        }
        Ok(RunRecord {
            image_id: image.image_id.clone(),
            image_sha256: digest,
            label: image.label,
            pair_id: image.pair_id.clone(),
            lvlm_model_id: fact_set.model_id.clone(),
            nli_model_id: matrix.nli_model_id().to_string(),
            fact_set,
            matrix,
            scores,
            started_at,
            finished_at: Utc::now(),
        })
    }

    /// Scores one image and appends the record to the run store, if any.
    pub fn score_image(&self, image: &ImageRecord) -> Result<RunRecord> {
        let record = self.build_record(image)?;
        if let Some(runs) = &self.runs {
            runs.append(&record)?;
        }
        Ok(record)
    }

    /// Scores every image with bounded concurrency. Records are persisted
    /// and returned in manifest order.
    pub fn score_batch(&self, manifest: &[ImageRecord]) -> Result<BatchOutcome<RunRecord>> {
        let outcome = self.run_bounded(manifest, |image| self.build_record(image))?;
        if let Some(runs) = &self.runs {
            for record in &outcome.items {
                runs.append(record)?;
            }
        }
        Ok(outcome)
    }

    /// Generates (or loads) facts for every image without scoring.
    pub fn facts_batch(&self, manifest: &[ImageRecord]) -> Result<BatchOutcome<FactSet>> {
        self.run_bounded(manifest, |image| self.facts_for(image))
    }

    fn run_bounded<T, F>(&self, manifest: &[ImageRecord], job: F) -> Result<BatchOutcome<T>>
    where
        T: Send,
        F: Fn(&ImageRecord) -> Result<T> + Sync,
    {
        if manifest.is_empty() {
            return Err(Error::Batch {
                message: "manifest is empty".into(),
                failures: Vec::new(),
            });
        }
        let slots: Vec<Mutex<Option<Result<T>>>> =
            manifest.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let workers = self.config.concurrency.clamp(1, manifest.len());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(image) = manifest.get(k) else { break };
                    let outcome = job(image);
                    if let Err(e) = &outcome {
                        log::warn!("image `{}` failed: {e}", image.image_id);
                        if self.config.fail_fast {
                            stop.store(true, Ordering::SeqCst);
                        }
                    }
                    *slots[k].lock().unwrap() = Some(outcome);
                });
            }
        });

        let mut outcome = BatchOutcome {
            items: Vec::new(),
            failures: Vec::new(),
            skipped: 0,
        };
        for (index, (slot, image)) in slots.into_iter().zip(manifest).enumerate() {
            match slot.into_inner().unwrap() {
                Some(Ok(item)) => outcome.items.push(item),
                Some(Err(error)) => outcome.failures.push(BatchFailure {
                    index,
                    image_id: image.image_id.clone(),
                    error,
                }),
                None => outcome.skipped += 1,
            }
        }
        if outcome.items.is_empty() {
            let message = match outcome.failures.first() {
                Some(f) => format!("all images failed; first: `{}`: {}", f.image_id, f.error),
                None => "no image was processed".to_string(),
            };
            return Err(Error::Batch {
                message,
                failures: outcome.failures,
            });
        }
        Ok(outcome)
    }
}
