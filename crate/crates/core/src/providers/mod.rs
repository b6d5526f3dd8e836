//! Chat-completion backends behind one interface, with retries, a
//! per-provider concurrency bound and an on-disk response cache.
//!
//! Sampling temperature is pinned to zero for every request; it is not a
//! configuration field. Because of that, caching on `(provider, prompt)` alone
//! is sound.

pub mod cache;
pub mod http;
pub mod mock;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{prompt_digest, CacheKey, CacheLookup, ResponseCache};
pub use mock::{MatchRule, MockBackend, ScriptRule};

/// Sampling temperature used for every request.
pub const TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestShape {
    OpenaiStyle,
    AnthropicStyle,
    Mock,
}

fn default_max_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_backoff_base_ms() -> u64 {
    1000
}
fn default_backoff_factor() -> u32 {
    4
}
fn default_max_concurrency() -> usize {
    8
}

/// Configuration for one backend. `name` is what appears in vote records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderHandle {
    pub name: String,
    pub request_shape: RequestShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Environment variable holding the API key, e.g. `CIVICSIM_OPENAI_KEY`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    /// Model id sent to the API; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_factor")]
    pub backoff_factor: u32,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
}

impl ProviderHandle {
    pub fn mock(name: impl Into<String>) -> Self {
        ProviderHandle {
            name: name.into(),
            request_shape: RequestShape::Mock,
            endpoint: None,
            auth_env: None,
            model: None,
            max_retries: default_max_retries(),
            timeout_secs: default_timeout_secs(),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_factor: default_backoff_factor(),
            max_concurrency: default_max_concurrency(),
            max_tokens: None,
            system_prompt: None,
            mock_script: None,
        }
    }

    pub fn model_id(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }

    /// Delay before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = u64::from(self.backoff_factor).saturating_pow(attempt.saturating_sub(1));
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct TransportError {
    pub transient: bool,
    pub message: String,
}

impl TransportError {
    pub fn transient(message: impl Into<String>) -> Self {
        TransportError { transient: true, message: message.into() }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        TransportError { transient: false, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("provider {provider} failed after {attempts} attempt(s): {last}")]
    Failed { provider: String, attempts: u32, last: String },
}

/// One request/response exchange with a backend, no retries.
pub trait Backend: Send + Sync {
    fn send(&self, prompt: &str) -> Result<String, TransportError>;
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct Provider {
    handle: ProviderHandle,
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
    limiter: Limiter,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl Provider {
    /// Builds the backend the handle describes. Missing credentials are
    /// reported here, before any network traffic.
    pub fn from_handle(handle: ProviderHandle, cache: Option<ResponseCache>) -> Result<Self, ProviderError> {
        let backend: Box<dyn Backend> = match handle.request_shape {
            RequestShape::Mock => {
                let path = handle.mock_script.as_ref().ok_or_else(|| {
                    ProviderError::Config(format!("mock provider {} has no mock_script", handle.name))
                })?;
                Box::new(MockBackend::from_script(&handle.name, path)?)
            }
            RequestShape::OpenaiStyle | RequestShape::AnthropicStyle => {
                let var = handle
                    .auth_env
                    .as_ref()
                    .ok_or_else(|| ProviderError::Config(format!("provider {} names no auth_env", handle.name)))?;
                let key = std::env::var(var)
                    .ok()
                    .filter(|k| !k.is_empty())
                    .ok_or_else(|| ProviderError::Config(format!("auth variable {var} is not set")))?;
                let endpoint = handle.endpoint.clone().unwrap_or_else(|| match handle.request_shape {
                    RequestShape::AnthropicStyle => "https://api.anthropic.com/v1/messages".to_string(),
                    _ => "https://api.openai.com/v1/chat/completions".to_string(),
                });
                Box::new(http::HttpBackend::new(&handle, endpoint, key))
            }
        };
        Ok(Self::with_backend(handle, backend, cache))
    }

    pub fn with_backend(handle: ProviderHandle, backend: Box<dyn Backend>, cache: Option<ResponseCache>) -> Self {
        let limiter = Limiter::new(handle.max_concurrency);
        Provider { handle, backend, cache, limiter, backend_calls: AtomicU64::new(0), cache_hits: AtomicU64::new(0) }
    }

    pub fn name(&self) -> &str {
        &self.handle.name
    }

    pub fn handle(&self) -> &ProviderHandle {
        &self.handle
    }

    /// Requests that reached the backend (cache hits excluded).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn cache_lookup(&self, prompt: &str) -> Option<String> {
        let cache = self.cache.as_ref()?;
        cache.lookup(&self.handle.name, &CacheKey::new(&self.handle.name, prompt))
    }

    /// Returns the backend's text for `prompt`, from cache when possible.
    pub fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let key = CacheKey::new(&self.handle.name, prompt);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lookup(&self.handle.name, &key) {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
        }
        let text = {
            let _permit = self.limiter.acquire();
            self.send_with_retries(prompt)?
        };
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.store(&self.handle.name, &key, prompt, &text) {
                log::warn!("could not cache response for {}: {e}", self.handle.name);
            }
        }
        Ok(text)
    }

    fn send_with_retries(&self, prompt: &str) -> Result<String, ProviderError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.send(prompt) {
                Ok(text) => return Ok(text),
                Err(e) if e.transient && attempt <= self.handle.max_retries => {
                    let wait = self.handle.backoff(attempt);
                    log::debug!("{}: transient failure ({e}), retrying in {wait:?}", self.handle.name);
                    thread::sleep(wait);
                }
                Err(e) => {
                    return Err(ProviderError::Failed {
                        provider: self.handle.name.clone(),
                        attempts: attempt,
                        last: e.message,
                    })
                }
            }
        }
    }
}
