//! OpenAI-compatible chat-completions client (single system + single user
//! message, non-streaming) with bounded exponential-backoff retries.

use serde::{Deserialize, Serialize};
use std::time::Duration;

use super::{Backend, BackendError, Completion, PromptRequest};
use crate::canonical::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1 << retry.min(16))
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads the API key from `var`; a missing variable leaves it unset.
    pub fn with_api_key_env(mut self, var: &str) -> Self {
        self.api_key = std::env::var(var).ok().filter(|k| !k.is_empty());
        self
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
    top_p: f64,
    seed: u64,
    max_tokens: u32,
    stream: bool,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Done(String),
    Retry(BackendError),
    Fail(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Attempt {
        let mut request = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = match request.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(BackendError::Timeout),
            Err(e) => return Attempt::Retry(BackendError::Unreachable(e.to_string())),
        };
        let status = response.status();
        let bytes = match response.bytes() {
            Ok(b) => b,
            Err(e) if e.is_timeout() => return Attempt::Retry(BackendError::Timeout),
            Err(e) => return Attempt::Retry(BackendError::Unreachable(e.to_string())),
        };
        if status.as_u16() == 429 {
            return Attempt::Retry(BackendError::RateLimited { attempts: 0 });
        }
        if !status.is_success() {
            let err = BackendError::HttpError {
                status: status.as_u16(),
                body_digest: sha256_hex(&bytes),
            };
            return if status.is_server_error() {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            };
        }
        match serde_json::from_slice::<ChatResponse>(&bytes) {
            Ok(parsed) => match parsed.choices.into_iter().next().and_then(|c| c.message.content) {
                Some(text) => Attempt::Done(text),
                None => Attempt::Fail(BackendError::MalformedResponse(
                    "no message content in first choice".into(),
                )),
            },
            Err(e) => Attempt::Fail(BackendError::MalformedResponse(e.to_string())),
        }
    }
}

impl Backend for HttpBackend {
    fn kind(&self) -> &'static str {
        "http"
    }

    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        let body = ChatRequest {
            model: &req.params.model_id,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &req.system_text,
                },
                ChatMessage {
                    role: "user",
                    content: &req.user_text,
                },
            ],
            temperature: req.params.temperature,
            top_p: req.params.top_p,
            seed: req.params.seed,
            max_tokens: req.params.max_tokens,
            stream: false,
        };
        let attempts = self.config.retry.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.retry.delay(attempt - 1));
            }
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    return Ok(Completion {
                        text,
                        backend_id: self.backend_id(req),
                        cached: false,
                    })
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("completion attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(match last.expect("at least one attempt") {
            BackendError::RateLimited { .. } => BackendError::RateLimited { attempts },
            other => other,
        })
    }
}
