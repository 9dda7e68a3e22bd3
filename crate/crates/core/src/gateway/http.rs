use std::time::Duration;

use base64::Engine;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    BackendConfig, FactBackend, FactCandidates, ImageInput, NliBackend, RawNliOutput,
    RequestLimiter,
};
use crate::error::{Error, Result};
use crate::model::{GenerationMode, GenerationParams};

const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvlmRequest {
    pub image_b64: String,
    pub media_type: String,
    pub prompt: String,
    pub num_return_sequences: usize,
    pub num_beams: usize,
    pub num_beam_groups: usize,
    pub diversity_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvlmResponse {
    pub facts: Vec<String>,
    pub model_id: String,
    /// Servers that could not run diverse beam search may report
    /// `sampling_fallback` here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_mode: Option<GenerationMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliRequest {
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliResponse {
    pub labels: Vec<String>,
    pub scores: Vec<f64>,
    pub model_id: String,
}

/// Blocking JSON-over-POST client with bounded concurrency and retries.
struct JsonClient {
    agent: ureq::Agent,
    config: BackendConfig,
    url: String,
    limiter: RequestLimiter,
}

impl JsonClient {
    fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let url = config
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::InvalidConfig("missing endpoint_url".into()))?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            limiter: RequestLimiter::new(config.max_in_flight),
            url,
            config,
        })
    }

    fn token(&self) -> Option<String> {
        let var = self.config.auth_token_env.as_deref()?;
        std::env::var(var).ok().filter(|t| !t.is_empty())
    }

    fn transport(&self, message: impl Into<String>) -> Error {
        Error::Transport {
            endpoint: self.url.clone(),
            message: message.into(),
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.retry_base_delay_ms as f64 * 2f64.powi(attempt as i32);
        let jitter = rand::rng().random_range(0.0..=0.5);
        Duration::from_secs_f64(base * (1.0 + jitter) / 1000.0).min(MAX_BACKOFF)
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R> {
        let token = self.token();
        let mut last_error = None;
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            let _permit = self.limiter.acquire();
            let mut request = self.agent.post(&self.url);
            if let Some(token) = &token {
                request = request.header("Authorization", &format!("Bearer {token}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if (200..300).contains(&status) {
                        return response
                            .body_mut()
                            .read_json::<R>()
                            .map_err(|e| Error::MalformedResponse(e.to_string()));
                    }
                    let retryable = status == 429 || status >= 500;
                    let error = self.transport(format!("HTTP status {status}"));
                    if !retryable {
                        return Err(error);
                    }
                    log::warn!("{} returned {status}, attempt {}", self.url, attempt + 1);
                    last_error = Some(error);
                }
                Err(e) => {
                    log::warn!(
                        "request to {} failed on attempt {}: {e}",
                        self.url,
                        attempt + 1
                    );
                    last_error = Some(self.transport(e.to_string()));
                }
            }
        }
        Err(last_error.unwrap_or_else(|| self.transport("no attempts made")))
    }

    fn identity(&self) -> &str {
        self.config.model_id.as_deref().unwrap_or(&self.url)
    }

    fn check_model(&self, reported: &str) -> Result<()> {
        match &self.config.model_id {
            Some(expected) if expected != reported => Err(Error::MalformedResponse(format!(
                "backend reported model `{reported}`, configured `{expected}`"
            ))),
            _ => Ok(()),
        }
    }
}

pub struct HttpFactBackend {
    client: JsonClient,
}

impl HttpFactBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        Ok(Self {
            client: JsonClient::new(config)?,
        })
    }

    pub fn request_for(&self, image: &ImageInput, params: &GenerationParams) -> LvlmRequest {
        let diverse = self.client.config.supports_diverse_beam;
        LvlmRequest {
            image_b64: base64::engine::general_purpose::STANDARD.encode(&image.bytes),
            media_type: image.media_type.clone(),
            prompt: params.prompt.clone(),
            num_return_sequences: params.num_facts,
            num_beams: if diverse { params.num_beams } else { 1 },
            num_beam_groups: if diverse { params.num_beam_groups } else { 1 },
            diversity_penalty: if diverse {
                params.diversity_penalty
            } else {
                0.0
            },
        }
    }
}

impl FactBackend for HttpFactBackend {
    fn model_id(&self) -> &str {
        self.client.identity()
    }

    fn generate(&self, image: &ImageInput, params: &GenerationParams) -> Result<FactCandidates> {
        let response: LvlmResponse = self.client.post(&self.request_for(image, params))?;
        self.client.check_model(&response.model_id)?;
        let fallback = if self.client.config.supports_diverse_beam {
            GenerationMode::DiverseBeam
        } else {
            GenerationMode::SamplingFallback
        };
        Ok(FactCandidates {
            facts: response.facts,
            model_id: response.model_id,
            generation_mode: response.generation_mode.unwrap_or(fallback),
        })
    }
}

pub struct HttpNliBackend {
    client: JsonClient,
}

impl HttpNliBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        Ok(Self {
            client: JsonClient::new(config)?,
        })
    }
}

impl NliBackend for HttpNliBackend {
    fn model_id(&self) -> &str {
        self.client.identity()
    }

    fn score(&self, premise: &str, hypothesis: &str) -> Result<RawNliOutput> {
        let request = NliRequest {
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
        };
        let response: NliResponse = self.client.post(&request)?;
        self.client.check_model(&response.model_id)?;
        Ok(RawNliOutput {
            labels: response.labels,
            values: response.scores,
            normalized: false,
        })
    }
}
