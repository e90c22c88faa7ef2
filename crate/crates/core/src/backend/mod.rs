//! Backend-agnostic text generation for the compressor and answerer roles,
//! with a deterministic mock for desk-scale runs and an HTTP client for real
//! serving stacks. Backends are shareable handles; `generate` may be called
//! concurrently.

mod http;
mod mock;
mod prompt;

pub use http::{HttpBackend, HttpBackendConfig, RetryPolicy};
pub use mock::{MockAnswerer, MockCompressor};
pub use prompt::{
    render_documents, PromptTemplates, DEFAULT_ANSWERER_TEMPLATE, DEFAULT_COMPRESSOR_TEMPLATE,
};

use std::sync::LazyLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the pipeline a request serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Compressor,
    Answerer,
}

/// A single text-generation exchange, independent of the backing engine.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub role: Role,
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Validation("prompt must be non-empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Validation("max_tokens must be > 0".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Validation("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub latency_ms: u64,
}

/// Contract implemented by every generation backend.
pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        (**self).generate(request)
    }
}

/// Token counting mode for context-length reporting.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TokenCountMode {
    /// Maximal runs of non-whitespace.
    #[default]
    Whitespace,
    /// Delegate to an external tokenizer endpoint; falls back to whitespace
    /// with a warning if the endpoint is unreachable.
    Pluggable { endpoint: String },
}

static TOKENIZER_CLIENT: LazyLock<reqwest::blocking::Client> = LazyLock::new(|| {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .expect("tokenizer client")
});

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    count: usize,
}

/// Counts tokens in `text` under the given mode.
pub fn count_tokens(text: &str, mode: &TokenCountMode) -> usize {
    match mode {
        TokenCountMode::Whitespace => text.split_whitespace().count(),
        TokenCountMode::Pluggable { endpoint } => {
            match remote_count(text, endpoint) {
                Ok(n) => n,
                Err(e) => {
                    log::warn!("tokenizer endpoint {endpoint} unavailable ({e}); falling back to whitespace");
                    text.split_whitespace().count()
                }
            }
        }
    }
}

fn remote_count(text: &str, endpoint: &str) -> std::result::Result<usize, String> {
    let resp = TOKENIZER_CLIENT
        .post(endpoint)
        .json(&TokenizeRequest { text })
        .send()
        .map_err(|e| e.to_string())?;
    if !resp.status().is_success() {
        return Err(format!("status {}", resp.status()));
    }
    let body: TokenizeResponse = resp.json().map_err(|e| e.to_string())?;
    Ok(body.count)
}
