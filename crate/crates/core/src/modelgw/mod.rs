//! Chat-completion gateway: generation parameters, the [`ChatModel`] trait,
//! an OpenAI-compatible HTTP client, a deterministic mock and a reply cache.

mod cache;
mod http;
mod mock;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptkit::ChatTranscript;

pub(crate) use cache::sha256_hex;
pub use cache::{cache_key, ReplyCache};
pub use http::{data_uri, wire_messages, HttpChatClient};
pub use mock::{mock_complete, MockModel, MockPolicy};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("endpoint failed after {attempts} attempt(s): {message}")]
    Endpoint { attempts: u32, message: String },
    #[error("endpoint rejected request with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("authentication failed (HTTP {status})")]
    Auth { status: u16 },
    #[error("unreadable image {path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("context length exceeded{}: {message}", .sample_id.as_ref().map(|s| format!(" for sample {s:?}")).unwrap_or_default())]
    ContextOverflow {
        sample_id: Option<String>,
        message: String,
    },
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
    #[error("mock model: {0}")]
    MockUsage(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

impl ModelError {
    /// Attaches the query sample id to context-overflow errors.
    pub fn for_sample(self, id: &str) -> Self {
        match self {
            ModelError::ContextOverflow { message, .. } => ModelError::ContextOverflow {
                sample_id: Some(id.to_owned()),
                message,
            },
            other => other,
        }
    }

    /// Short machine-readable tag recorded next to failed predictions.
    pub fn tag(&self) -> &'static str {
        match self {
            ModelError::Endpoint { .. } => "endpoint",
            ModelError::Request { .. } => "request",
            ModelError::Auth { .. } => "auth",
            ModelError::Input { .. } => "input",
            ModelError::ContextOverflow { .. } => "context_overflow",
            ModelError::BadResponse(_) => "bad_response",
            ModelError::MockUsage(_) => "mock_usage",
            ModelError::Config(_) => "config",
        }
    }
}

/// Decoding parameters, transmitted verbatim to the endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_k: u32,
    pub do_sample: bool,
    pub num_beams: u32,
    pub max_new_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 50,
            do_sample: true,
            num_beams: 1,
            max_new_tokens: 64,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ModelError::Config(
                "temperature must be a finite value >= 0".into(),
            ));
        }
        if self.top_k < 1 {
            return Err(ModelError::Config("top_k must be >= 1".into()));
        }
        if self.num_beams < 1 {
            return Err(ModelError::Config("num_beams must be >= 1".into()));
        }
        Ok(())
    }
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on every further retry, plus jitter.
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            auth_token_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(ModelError::Config("timeout must be positive".into()));
        }
        if self.base_url.trim().is_empty() || self.model_name.trim().is_empty() {
            return Err(ModelError::Config(
                "base_url and model_name are required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub total_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelReply {
    pub raw_text: String,
    pub latency_ms: u64,
    pub from_cache: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    /// Transient-failure retries spent before the reply arrived.
    #[serde(default)]
    pub retries: u32,
}

impl ModelReply {
    pub fn immediate(text: impl Into<String>) -> Self {
        Self {
            raw_text: text.into(),
            latency_ms: 0,
            from_cache: false,
            usage: None,
            retries: 0,
        }
    }
}

/// Anything that answers a chat transcript. Implementations must be safe to
/// call from many worker threads at once.
pub trait ChatModel: Send + Sync {
    fn complete(&self, transcript: &ChatTranscript) -> Result<ModelReply, ModelError>;

    /// Whether replies are worth caching (false for in-process mocks).
    fn cacheable(&self) -> bool {
        true
    }
}

impl<M: ChatModel + ?Sized> ChatModel for &M {
    fn complete(&self, transcript: &ChatTranscript) -> Result<ModelReply, ModelError> {
        (**self).complete(transcript)
    }

    fn cacheable(&self) -> bool {
        (**self).cacheable()
    }
}

impl<M: ChatModel + ?Sized> ChatModel for Box<M> {
    fn complete(&self, transcript: &ChatTranscript) -> Result<ModelReply, ModelError> {
        (**self).complete(transcript)
    }

    fn cacheable(&self) -> bool {
        (**self).cacheable()
    }
}
