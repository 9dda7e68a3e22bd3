use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("incomplete NLI matrix: no score for pair ({premise}, {hypothesis}){}", reason_suffix(.reason))]
    IncompleteMatrix {
        premise: usize,
        hypothesis: usize,
        reason: Option<String>,
    },

    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    #[error("backend returned {got} facts, expected {expected}")]
    InsufficientFacts { expected: usize, got: usize },

    #[error("malformed backend response: {0}")]
    MalformedResponse(String),

    #[error("replay miss: {0}")]
    ReplayMiss(String),

    #[error("cache miss for {kind} key {key}")]
    CacheMiss { kind: &'static str, key: String },

    #[error("cache integrity error in {}{}: {message}", path.display(), location_suffix(*.line, .key))]
    CacheIntegrity {
        path: PathBuf,
        line: Option<usize>,
        key: Option<String>,
        message: String,
    },

    #[error("input error for {}: {message}", path.display())]
    Input { path: PathBuf, message: String },

    #[error("evaluation input error: no score for image `{image_id}`")]
    MissingScore { image_id: String },

    #[error("evaluation input error: {0}")]
    EvalInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("batch failed: {message}")]
    Batch {
        message: String,
        failures: Vec<crate::pipeline::BatchFailure>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn reason_suffix(reason: &Option<String>) -> String {
    reason
        .as_ref()
        .map(|r| format!(": {r}"))
        .unwrap_or_default()
}

fn location_suffix(line: Option<usize>, key: &Option<String>) -> String {
    let mut s = String::new();
    if let Some(line) = line {
        s.push_str(&format!(" line {line}"));
    }
    if let Some(key) = key {
        s.push_str(&format!(" key {key}"));
    }
    s
}
