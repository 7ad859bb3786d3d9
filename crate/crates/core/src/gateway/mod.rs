//! Text-generation gateway: dispatches rendered prompts to a backend with a
//! persistent response cache, retries with exponential backoff, and a
//! bounded-parallel batch mode.

mod cache;
pub mod http;
pub mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::io::sha256_hex;
use crate::prompts::RenderedPrompt;

pub use cache::ResponseCache;

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: RenderedPrompt,
    pub generator_id: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    /// Greedy decoding (temperature 0) with the default token budget.
    pub fn new(prompt: RenderedPrompt, generator_id: impl Into<String>) -> Self {
        GenerationRequest {
            prompt,
            generator_id: generator_id.into(),
            temperature: 0.0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// SHA-256 over `(generator_id, prompt text, temperature, seed)`.
    pub fn fingerprint(&self) -> String {
        let key = serde_json::json!([
            self.generator_id,
            self.prompt.text,
            self.temperature,
            self.seed
        ]);
        sha256_hex(key.to_string().as_bytes())
    }
}

/// A completed generation; also the row format of the cache journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub fingerprint: String,
    pub request: GenerationRequest,
    pub response_text: String,
    pub latency_ms: u64,
    pub created_at: DateTime<Utc>,
    /// 1-based attempt on which the backend answered.
    pub attempt: u32,
}

/// Why a single backend call failed.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendFailure {
    /// Network trouble, rate limiting, server errors. Retried.
    #[error("transport: {0}")]
    Transport(String),
    /// The backend declined the content (safety block, content filter).
    #[error("refused: {payload}")]
    Refusal { payload: String },
    /// A non-retryable protocol error, e.g. bad credentials.
    #[error("rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unreachable after {attempts} attempts: {cause}")]
    Transport { attempts: u32, cause: String },
    #[error("backend refused the prompt: {payload}")]
    Refusal { payload: String },
    #[error("backend rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// A text-in/text-out generator.
pub trait TextBackend: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendFailure>;
}

impl<B: TextBackend + ?Sized> TextBackend for Box<B> {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendFailure> {
        (**self).complete(request)
    }
}

impl<B: TextBackend + ?Sized> TextBackend for std::sync::Arc<B> {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendFailure> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt; total attempts are `max_retries + 1`.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before attempt `attempt + 1`, doubling from `base_delay`.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

pub struct Gateway<B> {
    backend: B,
    cache: ResponseCache,
    retry: RetryPolicy,
    backend_calls: AtomicUsize,
}

impl<B: TextBackend> Gateway<B> {
    pub fn new(backend: B, cache: ResponseCache, retry: RetryPolicy) -> Self {
        Gateway {
            backend,
            cache,
            retry,
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Number of backend invocations (including failed attempts) so far.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// Serves `request` from the cache, or calls the backend and records the
    /// answer.
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationRecord, GatewayError> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        if let Some(hit) = self.cache.get(&fingerprint) {
            return Ok(hit);
        }

        let started = Instant::now();
        let mut attempt = 0;
        let text = loop {
            attempt += 1;
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(request) {
                Ok(text) => break text,
                Err(BackendFailure::Transport(cause)) => {
                    if attempt > self.retry.max_retries {
                        return Err(GatewayError::Transport {
                            attempts: attempt,
                            cause,
                        });
                    }
                    log::debug!("attempt {attempt} for {} failed: {cause}", request.prompt.example_id);
                    std::thread::sleep(self.retry.delay_after(attempt));
                }
                Err(BackendFailure::Refusal { payload }) => {
                    return Err(GatewayError::Refusal { payload });
                }
                Err(BackendFailure::Rejected { status, body }) => {
                    return Err(GatewayError::Rejected { status, body });
                }
            }
        };

        let record = GenerationRecord {
            fingerprint,
            request: request.clone(),
            response_text: text,
            latency_ms: started.elapsed().as_millis() as u64,
            created_at: Utc::now(),
            attempt,
        };
        self.cache.put(record.clone())?;
        Ok(record)
    }

    /// Runs every request with at most `max_in_flight` outstanding at once.
    /// Output `i` answers request `i`; failures are reported per item.
    pub fn generate_batch(
        &self,
        requests: &[GenerationRequest],
        max_in_flight: usize,
    ) -> Vec<Result<GenerationRecord, GatewayError>> {
        let workers = max_in_flight.max(1).min(requests.len());
        if workers == 0 {
            return Vec::new();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<GenerationRecord, GatewayError>>>> =
            Mutex::new((0..requests.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(request) = requests.get(i) else {
                        break;
                    };
                    let result = self.generate(request);
                    slots.lock().expect("result slots poisoned")[i] = Some(result);
                });
            }
        });
        slots
            .into_inner()
            .expect("result slots poisoned")
            .into_iter()
            .map(|r| r.expect("every index is claimed by exactly one worker"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptMode;
    use std::collections::HashMap;

    fn request(id: &str, text: &str) -> GenerationRequest {
        GenerationRequest::new(
            RenderedPrompt {
                mode: PromptMode::ThRe,
                example_id: id.into(),
                text: text.into(),
            },
            "gen",
        )
    }

    struct Canned(HashMap<String, String>);

    impl TextBackend for Canned {
        fn complete(&self, r: &GenerationRequest) -> Result<String, BackendFailure> {
            self.0
                .get(&r.prompt.text)
                .cloned()
                .ok_or_else(|| BackendFailure::Refusal { payload: "unknown".into() })
        }
    }

    #[test]
    fn fingerprint_covers_the_listed_fields_only() {
        let a = request("a", "hello");
        let mut b = request("b", "hello");
        b.max_new_tokens = 12;
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.seed = Some(1);
        assert_ne!(a.fingerprint(), c.fingerprint());
        let mut d = a.clone();
        d.temperature = 0.7;
        assert_ne!(a.fingerprint(), d.fingerprint());
        let mut e = a.clone();
        e.generator_id = "other".into();
        assert_ne!(a.fingerprint(), e.fingerprint());
    }

    #[test]
    fn invalid_requests() {
        let mut r = request("a", "x");
        r.max_new_tokens = 0;
        let gw = Gateway::new(Canned(HashMap::new()), ResponseCache::in_memory(), RetryPolicy::no_delay(0));
        assert!(matches!(gw.generate(&r), Err(GatewayError::InvalidRequest(_))));
        assert_eq!(gw.backend_calls(), 0);
    }

    #[test]
    fn canned_passthrough_and_cache() {
        let backend = Canned(HashMap::from([("hello".to_string(), "world".to_string())]));
        let gw = Gateway::new(backend, ResponseCache::in_memory(), RetryPolicy::no_delay(3));
        let first = gw.generate(&request("a", "hello")).unwrap();
        assert_eq!(first.response_text, "world");
        assert_eq!(first.attempt, 1);
        let second = gw.generate(&request("a", "hello")).unwrap();
        assert_eq!(second, first);
        assert_eq!(gw.backend_calls(), 1);
        assert!(matches!(
            gw.generate(&request("b", "nope")),
            Err(GatewayError::Refusal { .. })
        ));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.delay_after(1), Duration::from_millis(100));
        assert_eq!(p.delay_after(2), Duration::from_millis(200));
        assert_eq!(p.delay_after(3), Duration::from_millis(350));
        assert_eq!(p.delay_after(40), Duration::from_millis(350));
    }
}
