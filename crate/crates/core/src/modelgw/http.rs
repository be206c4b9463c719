use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;
use rand::Rng;
use serde_json::{json, Value};

use super::{ChatModel, GenerationParams, ModelEndpoint, ModelError, ModelReply, Usage};
use crate::promptkit::{ChatTranscript, ContentPart, Role};

fn image_format(path: &Path, bytes: &[u8]) -> &'static str {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => return "png",
        [0xFF, 0xD8, 0xFF, ..] => return "jpeg",
        [b'G', b'I', b'F', b'8', ..] => return "gif",
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => return "webp",
        [b'B', b'M', ..] => return "bmp",
        [b'I', b'I', 0x2A, 0x00, ..] | [b'M', b'M', 0x00, 0x2A, ..] => return "tiff",
        _ => {}
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "jpg" | "jpeg" => "jpeg",
        "gif" => "gif",
        "webp" => "webp",
        "bmp" => "bmp",
        "tif" | "tiff" => "tiff",
        _ => "png",
    }
}

/// Reads an image file into a `data:image/<fmt>;base64,...` URI.
pub fn data_uri(path: &Path) -> Result<String, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(format!(
        "data:image/{};base64,{}",
        image_format(path, &bytes),
        base64::engine::general_purpose::STANDARD.encode(&bytes)
    ))
}

/// Converts a transcript to OpenAI-style `messages`. User turns become
/// arrays of `text`/`image_url` parts; system and assistant turns are plain
/// strings.
pub fn wire_messages(transcript: &ChatTranscript) -> Result<Vec<Value>, ModelError> {
    transcript
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            if m.role == Role::User {
                let parts = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text { text } => Ok(json!({"type": "text", "text": text})),
                        ContentPart::Image { image_ref } => Ok(json!({
                            "type": "image_url",
                            "image_url": {"url": data_uri(image_ref)?},
                        })),
                    })
                    .collect::<Result<Vec<_>, ModelError>>()?;
                Ok(json!({"role": role, "content": parts}))
            } else {
                Ok(json!({"role": role, "content": m.text_content()}))
            }
        })
        .collect()
}

/// Blocking client for `POST {base_url}/chat/completions`.
pub struct HttpChatClient {
    endpoint: ModelEndpoint,
    params: GenerationParams,
    token: Option<String>,
    agent: ureq::Agent,
    requests: AtomicU64,
}

enum Attempt {
    Done(ModelReply),
    Transient(String),
    Fatal(ModelError),
    Sanitize,
}

impl HttpChatClient {
    pub fn new(endpoint: ModelEndpoint, params: GenerationParams) -> Result<Self, ModelError> {
        endpoint.validate()?;
        params.validate()?;
        let token = match &endpoint.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ModelError::Config(format!("auth token variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint,
            params,
            token,
            agent,
            requests: AtomicU64::new(0),
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    pub fn params(&self) -> &GenerationParams {
        &self.params
    }

    /// HTTP requests issued so far, retries included.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    /// The JSON body for `transcript`. Sanitized bodies drop the
    /// vendor-extension `extra` object.
    pub fn request_body(
        &self,
        transcript: &ChatTranscript,
        sanitized: bool,
    ) -> Result<Value, ModelError> {
        let mut body = json!({
            "model": self.endpoint.model_name,
            "messages": wire_messages(transcript)?,
            "temperature": self.params.temperature,
            "max_tokens": self.params.max_new_tokens,
        });
        if let Some(seed) = self.params.seed {
            body["seed"] = json!(seed);
        }
        if !sanitized {
            body["extra"] = json!({
                "top_k": self.params.top_k,
                "num_beams": self.params.num_beams,
                "do_sample": self.params.do_sample,
            });
        }
        Ok(body)
    }

    fn url(&self) -> String {
        format!(
            "{}/chat/completions",
            self.endpoint.base_url.trim_end_matches('/')
        )
    }

    fn attempt(&self, body: &str, sanitized: bool, started: Instant, retries: u32) -> Attempt {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self
            .agent
            .post(&self.url())
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.into_body().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        match status {
            200..=299 => match parse_completion(&text) {
                Ok((raw_text, usage)) => Attempt::Done(ModelReply {
                    raw_text,
                    latency_ms: started.elapsed().as_millis() as u64,
                    from_cache: false,
                    usage,
                    retries,
                }),
                Err(e) => Attempt::Fatal(e),
            },
            500..=599 => Attempt::Transient(format!("HTTP {status}: {text}")),
            401 | 403 => Attempt::Fatal(ModelError::Auth { status }),
            _ => {
                let lower = text.to_lowercase();
                if is_context_overflow(&lower) {
                    Attempt::Fatal(ModelError::ContextOverflow {
                        sample_id: None,
                        message: text,
                    })
                } else if !sanitized
                    && (status == 400 || status == 422)
                    && rejects_extra_fields(&lower)
                {
                    Attempt::Sanitize
                } else {
                    Attempt::Fatal(ModelError::Request { status, body: text })
                }
            }
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.endpoint.backoff_base_ms as f64 * 2f64.powi(retry as i32);
        let jitter = rand::rng().random_range(0.0..0.25);
        Duration::from_secs_f64(base * (1.0 + jitter) / 1000.0)
    }
}

fn is_context_overflow(lower: &str) -> bool {
    lower.contains("context")
        && ["length", "too long", "exceed", "maximum"]
            .iter()
            .any(|w| lower.contains(w))
}

fn rejects_extra_fields(lower: &str) -> bool {
    lower.contains("extra")
        || [
            "unknown field",
            "unrecognized",
            "not permitted",
            "additional properties",
        ]
        .iter()
        .any(|w| lower.contains(w))
}

fn parse_completion(text: &str) -> Result<(String, Option<Usage>), ModelError> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| ModelError::BadResponse(e.to_string()))?;
    let content = &v["choices"][0]["message"]["content"];
    let raw = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        _ => return Err(ModelError::BadResponse("unexpected message content".into())),
    };
    if v["choices"].as_array().is_none_or(|c| c.is_empty()) {
        return Err(ModelError::BadResponse("response has no choices".into()));
    }
    let usage = v
        .get("usage")
        .and_then(|u| serde_json::from_value(u.clone()).ok());
    Ok((raw, usage))
}

impl ChatModel for HttpChatClient {
    fn complete(&self, transcript: &ChatTranscript) -> Result<ModelReply, ModelError> {
        let started = Instant::now();
        let mut sanitized = false;
        let mut body = self.request_body(transcript, sanitized)?.to_string();
        let mut retries = 0;
        loop {
            match self.attempt(&body, sanitized, started, retries) {
                Attempt::Done(reply) => return Ok(reply),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Sanitize => {
                    tracing::warn!(
                        "endpoint rejected extension fields; retrying with core fields only"
                    );
                    sanitized = true;
                    body = self.request_body(transcript, sanitized)?.to_string();
                }
                Attempt::Transient(message) => {
                    if retries >= self.endpoint.max_retries {
                        return Err(ModelError::Endpoint {
                            attempts: retries + 1,
                            message,
                        });
                    }
                    let delay = self.backoff(retries);
                    tracing::debug!(
                        "transient endpoint failure ({message}); retrying in {delay:?}"
                    );
                    thread::sleep(delay);
                    retries += 1;
                }
            }
        }
    }
}
