//! HTTP generation backend speaking the chat-completions convention:
//! `POST {base_url}/v1/chat/completions` with `model`, `messages`,
//! `temperature`, `max_tokens`, and optional `seed`, authenticated by a
//! bearer token read from an environment variable.
//!
//! Transient faults (timeouts, 429, 5xx) are retried with exponential
//! backoff up to a cap; a request that still fails surfaces as a transport
//! error, never as fabricated text. Concurrent calls are limited by a
//! configured in-flight cap.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{Backend, GenerationRequest, GenerationResponse, Role};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub compressor_model: String,
    pub answerer_model: String,
    /// Name of the environment variable holding the API key. When the
    /// variable is unset the request is sent without an Authorization
    /// header (local serving stacks usually accept that).
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// When set, every exchange is appended as a JSONL transcript record
    /// usable for replay tests.
    pub transcript_path: Option<PathBuf>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".into(),
            compressor_model: "compressor".into(),
            answerer_model: "answerer".into(),
            api_key_env: "CORE_API_KEY".into(),
            timeout_ms: 30_000,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            transcript_path: None,
        }
    }
}

/// Exponential backoff schedule: `base * 2^attempt`, capped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    /// The full delay schedule, one entry per retry.
    pub fn delays(&self) -> Vec<Duration> {
        (0..self.max_retries)
            .map(|attempt| {
                let ms = self
                    .base_delay_ms
                    .saturating_mul(1u64 << attempt.min(32))
                    .min(self.max_delay_ms);
                Duration::from_millis(ms)
            })
            .collect()
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        GatePermit { gate: self }
    }
}

struct GatePermit<'a> {
    gate: &'a Gate,
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.gate.available.lock().unwrap() += 1;
        self.gate.cv.notify_one();
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

#[derive(Serialize)]
struct TranscriptRecord<'a> {
    request: &'a str,
    status: u16,
    response: &'a str,
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
    sleeper: Sleeper,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self> {
        Self::with_sleeper(cfg, Box::new(std::thread::sleep))
    }

    /// Test hook: replaces the inter-retry sleep.
    pub fn with_sleeper(cfg: HttpBackendConfig, sleeper: Sleeper) -> Result<Self> {
        if cfg.max_in_flight == 0 {
            return Err(Error::Validation("max_in_flight must be >= 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::Transport {
                retryable: false,
                message: format!("building HTTP client: {e}"),
            })?;
        Ok(Self {
            gate: Gate::new(cfg.max_in_flight),
            cfg,
            client,
            sleeper,
        })
    }

    /// The serialized request body for a generation request. Stable byte
    /// layout (serde field order), which transcript replay tests rely on.
    pub fn request_body(&self, request: &GenerationRequest) -> Result<String> {
        request.validate()?;
        let model = match request.role {
            Role::Compressor => &self.cfg.compressor_model,
            Role::Answerer => &self.cfg.answerer_model,
        };
        serde_json::to_string(&ChatRequest {
            model,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        })
        .map_err(|e| Error::Validation(format!("serializing request: {e}")))
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        )
    }

    fn record_transcript(&self, body: &str, status: u16, response: &str) {
        let Some(path) = &self.cfg.transcript_path else {
            return;
        };
        let record = TranscriptRecord {
            request: body,
            status,
            response,
        };
        let line = match serde_json::to_string(&record) {
            Ok(l) => l,
            Err(e) => {
                log::warn!("transcript serialization failed: {e}");
                return;
            }
        };
        match OpenOptions::new().create(true).append(true).open(path) {
            Ok(mut f) => {
                if let Err(e) = writeln!(f, "{line}") {
                    log::warn!("transcript write failed: {e}");
                }
            }
            Err(e) => log::warn!("transcript open failed: {e}"),
        }
    }

    /// One POST attempt. `Err(true, _)` marks retryable failures.
    fn attempt(&self, body: &str) -> std::result::Result<GenerationResponse, (bool, String)> {
        let start = Instant::now();
        let mut req = self
            .client
            .post(self.endpoint())
            .header("Content-Type", "application/json")
            .body(body.to_string());
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| {
            // Timeouts and connection failures are worth retrying.
            (true, format!("request failed: {e}"))
        })?;
        let status = resp.status();
        let text = resp
            .bytes()
            .map(|b| String::from_utf8_lossy(&b).into_owned())
            .map_err(|e| (true, format!("reading response body: {e}")))?;
        self.record_transcript(body, status.as_u16(), &text);
        if status.as_u16() == 429 || status.is_server_error() {
            return Err((true, format!("upstream status {status}")));
        }
        if !status.is_success() {
            return Err((false, format!("upstream status {status}: {text}")));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| (false, format!("malformed upstream reply: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| (false, "malformed upstream reply: no choices".to_string()))?;
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (0, choice.message.content.split_whitespace().count()),
        };
        Ok(GenerationResponse {
            text: choice.message.content,
            prompt_tokens,
            completion_tokens,
            latency_ms: start.elapsed().as_millis() as u64,
        })
    }
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        let body = self.request_body(request)?;
        let _permit = self.gate.acquire();
        let delays = self.cfg.retry.delays();
        let mut last_err = String::new();
        for attempt in 0..=delays.len() {
            match self.attempt(&body) {
                Ok(resp) => return Ok(resp),
                Err((retryable, msg)) => {
                    if !retryable {
                        return Err(Error::Transport {
                            retryable: false,
                            message: msg,
                        });
                    }
                    last_err = msg;
                    if attempt < delays.len() {
                        log::debug!(
                            "retryable backend failure (attempt {}): {last_err}; backing off {:?}",
                            attempt + 1,
                            delays[attempt]
                        );
                        (self.sleeper)(delays[attempt]);
                    }
                }
            }
        }
        Err(Error::Transport {
            retryable: true,
            message: format!("giving up after {} attempts: {last_err}", delays.len() + 1),
        })
    }
}
