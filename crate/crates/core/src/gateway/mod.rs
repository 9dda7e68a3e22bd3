//! Clients for the fact-generation and NLI inference backends.
//!
//! Two transports exist: JSON over HTTP POST, and replay files that serve
//! responses recorded earlier. Both sit behind [`FactBackend`] and
//! [`NliBackend`], so the pipeline never knows which one it is talking to.

mod http;
mod replay;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    ordered_pairs, FactSet, GenerationMode, GenerationParams, NliMatrix, NliTriple,
    TRIPLE_SUM_TOLERANCE,
};

pub use http::{
    HttpFactBackend, HttpNliBackend, LvlmRequest, LvlmResponse, NliRequest, NliResponse,
};
pub use replay::{FactReplayRecord, NliReplayRecord, ReplayFactBackend, ReplayNliBackend};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpLvlm,
    HttpNli,
    Replay,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::HttpLvlm => "http_lvlm",
            BackendKind::HttpNli => "http_nli",
            BackendKind::Replay => "replay",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding a bearer token.
    pub auth_token_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub replay_path: Option<PathBuf>,
    /// Model identity used in cache keys. Defaults to the endpoint URL for
    /// HTTP backends and to the single model found in a replay file.
    pub model_id: Option<String>,
    pub max_in_flight: usize,
    pub retry_base_delay_ms: u64,
    /// When false the LVLM request asks for plain sampling and the
    /// resulting fact sets are tagged `sampling_fallback`.
    pub supports_diverse_beam: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Replay,
            endpoint_url: None,
            auth_token_env: None,
            timeout_secs: 60.0,
            max_retries: 3,
            replay_path: None,
            model_id: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retry_base_delay_ms: 500,
            supports_diverse_beam: true,
        }
    }
}

impl BackendConfig {
    pub fn http(kind: BackendKind, url: impl Into<String>) -> Self {
        Self {
            kind,
            endpoint_url: Some(url.into()),
            ..Self::default()
        }
    }

    pub fn replay(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Replay,
            replay_path: Some(path.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackendKind::HttpLvlm | BackendKind::HttpNli => {
                if self
                    .endpoint_url
                    .as_deref()
                    .is_none_or(|u| u.trim().is_empty())
                {
                    return Err(Error::InvalidConfig(format!(
                        "{} backend requires endpoint_url",
                        self.kind
                    )));
                }
            }
            BackendKind::Replay => {
                if self.replay_path.is_none() {
                    return Err(Error::InvalidConfig(
                        "replay backend requires replay_path".into(),
                    ));
                }
            }
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.max_in_flight == 0 {
            return Err(Error::InvalidConfig(
                "max_in_flight must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Image payload handed to the fact backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInput {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

impl ImageInput {
    pub fn new(bytes: Vec<u8>, media_type: impl Into<String>) -> Self {
        Self {
            bytes,
            media_type: media_type.into(),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::new(bytes, media_type_for(path)))
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn media_type_for(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

/// Candidate facts as returned by a backend, before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct FactCandidates {
    pub facts: Vec<String>,
    pub model_id: String,
    pub generation_mode: GenerationMode,
}

pub trait FactBackend: Send + Sync {
    /// Identity of the generator, known before any request is made.
    fn model_id(&self) -> &str;

    fn generate(&self, image: &ImageInput, params: &GenerationParams) -> Result<FactCandidates>;
}

pub trait NliBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn score(&self, premise: &str, hypothesis: &str) -> Result<RawNliOutput>;
}

/// Unnormalized classifier output with backend-specific label names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawNliOutput {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    /// Set when the backend promises the values already form a distribution.
    #[serde(default)]
    pub normalized: bool,
}

impl RawNliOutput {
    pub fn new(labels: &[&str], values: &[f64], normalized: bool) -> Self {
        Self {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            values: values.to_vec(),
            normalized,
        }
    }
}

/// Maps raw output onto an [`NliTriple`].
///
/// Values that already form a probability distribution pass through;
/// anything else is treated as logits and softmax-normalized.
pub fn normalize_raw(raw: &RawNliOutput) -> Result<NliTriple> {
    if raw.labels.len() != 3 || raw.values.len() != 3 {
        return Err(Error::MalformedResponse(format!(
            "expected 3 labels and 3 values, got {} and {}",
            raw.labels.len(),
            raw.values.len()
        )));
    }
    let mut slots: [Option<f64>; 3] = [None; 3];
    for (label, &value) in raw.labels.iter().zip(&raw.values) {
        let slot = match label.trim().to_ascii_lowercase().as_str() {
            "entailment" => 0,
            "contradiction" => 1,
            "neutral" => 2,
            other => {
                return Err(Error::MalformedResponse(format!(
                    "unknown NLI label `{other}`"
                )));
            }
        };
        if slots[slot].replace(value).is_some() {
            return Err(Error::MalformedResponse(format!(
                "duplicate NLI label `{label}`"
            )));
        }
    }
    let values = slots.map(|v| v.expect("three distinct labels fill three slots"));
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::MalformedResponse(format!(
            "non-finite NLI scores {values:?}"
        )));
    }

    let is_distribution = values.iter().all(|v| (0.0..=1.0).contains(v))
        && (values.iter().sum::<f64>() - 1.0).abs() <= TRIPLE_SUM_TOLERANCE;
    let [ent, con, neu] = if is_distribution {
        values
    } else if raw.normalized {
        return Err(Error::MalformedResponse(format!(
            "scores {values:?} flagged as normalized do not form a distribution"
        )));
    } else {
        softmax(values)
    };
    NliTriple::new(ent, con, neu).map_err(|e| Error::MalformedResponse(e.to_string()))
}

fn softmax(logits: [f64; 3]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|v| (v - max).exp());
    let total: f64 = exp.iter().sum();
    exp.map(|v| v / total)
}

pub fn generate_facts(
    image_id: &str,
    image: &ImageInput,
    params: &GenerationParams,
    backend: &dyn FactBackend,
) -> Result<FactSet> {
    if image.bytes.is_empty() {
        return Err(Error::InvalidInput(format!("image `{image_id}` is empty")));
    }
    params.validate()?;
    let candidates = backend.generate(image, params)?;
    if candidates.facts.len() < params.num_facts {
        return Err(Error::InsufficientFacts {
            expected: params.num_facts,
            got: candidates.facts.len(),
        });
    }
    let mut facts = candidates.facts;
    facts.truncate(params.num_facts);
    if let Some(i) = facts.iter().position(|f| f.trim().is_empty()) {
        return Err(Error::MalformedResponse(format!(
            "fact {i} for `{image_id}` is blank"
        )));
    }
    let mut set = FactSet::new(image_id, facts, params.clone(), candidates.model_id)?;
    set.generation_mode = candidates.generation_mode;
    Ok(set)
}

pub fn score_pair(premise: &str, hypothesis: &str, backend: &dyn NliBackend) -> Result<NliTriple> {
    if premise.trim().is_empty() || hypothesis.trim().is_empty() {
        return Err(Error::InvalidInput(
            "premise and hypothesis must be nonempty".into(),
        ));
    }
    normalize_raw(&backend.score(premise, hypothesis)?)
}

pub fn build_nli_matrix(
    facts: &FactSet,
    backend: &dyn NliBackend,
    concurrency: usize,
) -> Result<NliMatrix> {
    build_nli_matrix_with(
        facts,
        backend.model_id(),
        concurrency,
        |premise, hypothesis| score_pair(premise, hypothesis, backend),
    )
}

/// Scores every ordered pair of `facts` through `scorer`, using up to
/// `concurrency` worker threads. The result does not depend on the order
/// in which calls complete.
pub fn build_nli_matrix_with<F>(
    facts: &FactSet,
    nli_model_id: &str,
    concurrency: usize,
    scorer: F,
) -> Result<NliMatrix>
where
    F: Fn(&str, &str) -> Result<NliTriple> + Sync,
{
    let n = facts.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "fact set `{}` has {n} facts, need at least 2",
            facts.image_id
        )));
    }
    let pairs: Vec<(usize, usize)> = ordered_pairs(n).collect();
    let results: Vec<Mutex<Option<Result<NliTriple>>>> =
        pairs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = concurrency.clamp(1, pairs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(i, j)) = pairs.get(k) else { break };
                let outcome = scorer(&facts.facts[i], &facts.facts[j]);
                *results[k].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut matrix = NliMatrix::new(n, nli_model_id);
    for (&(i, j), slot) in pairs.iter().zip(results) {
        match slot.into_inner().unwrap() {
            Some(Ok(triple)) => matrix.insert(i, j, triple)?,
            // Cache failures are not about the pair itself.
            Some(Err(e @ (Error::CacheIntegrity { .. } | Error::CacheMiss { .. }))) => {
                return Err(e)
            }
            Some(Err(e)) => {
                return Err(Error::IncompleteMatrix {
                    premise: i,
                    hypothesis: j,
                    reason: Some(e.to_string()),
                })
            }
            None => unreachable!("every pair is claimed by a worker"),
        }
    }
    Ok(matrix)
}

pub fn connect_fact_backend(config: &BackendConfig) -> Result<Arc<dyn FactBackend>> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::HttpLvlm => Arc::new(HttpFactBackend::new(config.clone())?),
        BackendKind::Replay => Arc::new(ReplayFactBackend::open(config)?),
        BackendKind::HttpNli => {
            return Err(Error::InvalidConfig(
                "an http_nli backend cannot generate facts".into(),
            ))
        }
    })
}

pub fn connect_nli_backend(config: &BackendConfig) -> Result<Arc<dyn NliBackend>> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::HttpNli => Arc::new(HttpNliBackend::new(config.clone())?),
        BackendKind::Replay => Arc::new(ReplayNliBackend::open(config)?),
        BackendKind::HttpLvlm => {
            return Err(Error::InvalidConfig(
                "an http_lvlm backend cannot score NLI pairs".into(),
            ))
        }
    })
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct RequestLimiter {
    limit: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
}

impl RequestLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> LimiterPermit<'_> {
        let mut count = self.in_flight.lock().unwrap();
        while *count >= self.limit {
            count = self.released.wait(count).unwrap();
        }
        *count += 1;
        LimiterPermit { limiter: self }
    }
}

pub struct LimiterPermit<'a> {
    limiter: &'a RequestLimiter,
}

impl Drop for LimiterPermit<'_> {
    fn drop(&mut self) {
        *self.limiter.in_flight.lock().unwrap() -= 1;
        self.limiter.released.notify_one();
    }
}
