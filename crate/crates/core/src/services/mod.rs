//! Clients for the embedding and chat-generation services.
//!
//! Both speak the common chat-completion / embeddings HTTP-JSON shape. The
//! transport is a trait so tests can count concurrent requests or script
//! failures without a network.

mod http;
mod mock;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use http::{
    ChatClient, EmbeddingClient, HttpTransport, Transport, TransportError, TransportResponse,
};
pub use mock::{stable_hash, HashingEmbedder, KeyExtractor, MockGenerator};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("batch failed for inputs {failed_indices:?}: {message}")]
    Batch {
        failed_indices: Vec<usize>,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ServiceError> {
        if values.is_empty() {
            return Err(ServiceError::Protocol("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ServiceError::Protocol("non-finite embedding value".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_text: String,
    pub user_text: String,
    pub max_new_tokens: u32,
    pub num_return_sequences: u32,
    pub temperature: f64,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.max_new_tokens == 0 {
            return Err(ServiceError::InvalidRequest("max_new_tokens must be >= 1".into()));
        }
        if self.num_return_sequences == 0 {
            return Err(ServiceError::InvalidRequest(
                "num_return_sequences must be >= 1".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ServiceError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// Exponential backoff with multiplicative jitter in `[0.5, 1.0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backoff {
    pub initial_ms: u64,
    pub factor: f64,
    pub max_ms: u64,
    pub jitter: bool,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial_ms: 1_000,
            factor: 2.0,
            max_ms: 30_000,
            jitter: true,
        }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let base = (self.initial_ms as f64 * self.factor.powi(retry as i32)).min(self.max_ms as f64);
        let scale = if self.jitter {
            rand::thread_rng().gen_range(0.5..=1.0)
        } else {
            1.0
        };
        Duration::from_micros((base * scale * 1_000.0) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub base_url: String,
    pub model: String,
    pub api_key_env_name: String,
    pub request_timeout: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Texts per embeddings request.
    pub batch_size: usize,
    pub backoff: Backoff,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".into(),
            model: String::new(),
            api_key_env_name: "OPENAI_API_KEY".into(),
            request_timeout: 60,
            max_retries: 3,
            max_in_flight: 4,
            batch_size: 64,
            backoff: Backoff::default(),
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.max_in_flight == 0 {
            return Err(ServiceError::InvalidRequest("max_in_flight must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ServiceError::InvalidRequest("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path.trim_start_matches('/'))
    }
}

/// Anything that turns a prompt into ranked candidate strings.
pub trait Generator: Send + Sync {
    /// Returns exactly `request.num_return_sequences` strings, best first.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, ServiceError>;

    /// How many requests callers may usefully issue at once.
    fn max_in_flight(&self) -> usize {
        1
    }
}

pub trait Embedder: Send + Sync {
    /// One vector per input text, in input order, all of the same dimension.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ServiceError>;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, ServiceError> {
        (**self).generate(request)
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

impl<G: Generator + ?Sized> Generator for Box<G> {
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, ServiceError> {
        (**self).generate(request)
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ServiceError> {
        (**self).embed_batch(texts)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    limit: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut current = self.current.lock().unwrap();
        while *current >= self.limit {
            current = self.freed.wait(current).unwrap();
        }
        *current += 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.current.lock().unwrap() -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Runs `f` over `0..n` on up to `workers` threads, returning results in
/// index order.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= n {
                    break;
                }
                let value = f(idx);
                *slots[idx].lock().unwrap() = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_schedule_caps() {
        let b = Backoff {
            jitter: false,
            ..Backoff::default()
        };
        assert_eq!(b.delay(0), Duration::from_secs(1));
        assert_eq!(b.delay(1), Duration::from_secs(2));
        assert_eq!(b.delay(4), Duration::from_secs(16));
        assert_eq!(b.delay(5), Duration::from_secs(30));
        assert_eq!(b.delay(12), Duration::from_secs(30));
        let jittered = Backoff::default().delay(2);
        assert!(jittered >= Duration::from_secs(2) && jittered <= Duration::from_secs(4));
    }

    #[test]
    fn request_validation() {
        let mut req = GenerationRequest {
            system_text: String::new(),
            user_text: "x".into(),
            max_new_tokens: 30,
            num_return_sequences: 1,
            temperature: 0.0,
        };
        assert!(req.validate().is_ok());
        req.num_return_sequences = 0;
        assert!(req.validate().is_err());
        req.num_return_sequences = 1;
        req.max_new_tokens = 0;
        assert!(req.validate().is_err());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let out = parallel_map(100, 8, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
