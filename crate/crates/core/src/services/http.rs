use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    parallel_map, EmbeddingVector, Embedder, GenerationRequest, Generator, InFlightLimiter,
    ServiceConfig, ServiceError,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("undecodable response body: {0}")]
    Decode(String),
}

/// Status code plus decoded JSON body.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportResponse {
    pub status: u16,
    pub body: Value,
}

/// A single JSON POST. Implementations must be shareable across threads.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<TransportResponse, TransportError>;
}

/// Blocking reqwest transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<TransportResponse, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| TransportError::Decode(e.to_string()))?;
        let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
        Ok(TransportResponse { status, body })
    }
}

/// Shared plumbing: config, transport, retry loop and the in-flight bound.
pub(crate) struct ServiceClient {
    config: ServiceConfig,
    transport: Arc<dyn Transport>,
    limiter: InFlightLimiter,
    api_key: Option<String>,
}

impl ServiceClient {
    fn new(config: ServiceConfig, transport: Arc<dyn Transport>) -> Result<Self, ServiceError> {
        config.validate()?;
        let api_key = if config.api_key_env_name.is_empty() {
            None
        } else {
            std::env::var(&config.api_key_env_name).ok()
        };
        Ok(Self {
            limiter: InFlightLimiter::new(config.max_in_flight),
            config,
            transport,
            api_key,
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ServiceError> {
        let url = self.config.endpoint(path);
        let timeout = Duration::from_secs(self.config.request_timeout.max(1));
        let mut attempt = 0;
        loop {
            log::debug!(
                "POST {url} (authorization: {}) body={body}",
                if self.api_key.is_some() { "Bearer ***" } else { "none" }
            );
            let outcome = {
                let _permit = self.limiter.acquire();
                self.transport
                    .post_json(&url, self.api_key.as_deref(), body, timeout)
            };
            let retryable = match outcome {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    log::debug!("{url} -> {} body={}", resp.status, resp.body);
                    return Ok(resp.body);
                }
                Ok(resp) if resp.status == 429 || resp.status >= 500 => ServiceError::Http {
                    status: resp.status,
                    body: resp.body.to_string(),
                },
                Ok(resp) => {
                    return Err(ServiceError::Http {
                        status: resp.status,
                        body: resp.body.to_string(),
                    })
                }
                Err(TransportError::Decode(msg)) => return Err(ServiceError::Protocol(msg)),
                Err(e) => ServiceError::Transport {
                    attempts: attempt + 1,
                    message: e.to_string(),
                },
            };
            if attempt >= self.config.max_retries {
                return Err(retryable);
            }
            let delay = self.config.backoff.delay(attempt);
            log::warn!("{url}: {retryable}; retrying in {delay:?}");
            std::thread::sleep(delay);
            attempt += 1;
        }
    }
}

/// Client for a `/v1/chat/completions` endpoint.
pub struct ChatClient {
    inner: ServiceClient,
}

impl ChatClient {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        Self::with_transport(config, Arc::new(HttpTransport::new()))
    }

    pub fn with_transport(
        config: ServiceConfig,
        transport: Arc<dyn Transport>,
    ) -> Result<Self, ServiceError> {
        Ok(Self {
            inner: ServiceClient::new(config, transport)?,
        })
    }

    fn request_body(&self, request: &GenerationRequest, n: u32) -> Value {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_text}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        json!({
            "model": self.inner.config.model,
            "messages": messages,
            "max_tokens": request.max_new_tokens,
            "n": n,
            "temperature": request.temperature,
        })
    }
}

fn parse_choices(body: &Value) -> Result<Vec<String>, ServiceError> {
    let choices = body
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| ServiceError::Protocol("response has no choices array".into()))?;
    let mut indexed = Vec::with_capacity(choices.len());
    for (pos, choice) in choices.iter().enumerate() {
        let index = choice
            .get("index")
            .and_then(Value::as_u64)
            .unwrap_or(pos as u64);
        let content = choice
            .pointer("/message/content")
            .or_else(|| choice.get("text"))
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_owned();
        indexed.push((index, content));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, c)| c).collect())
}

impl Generator for ChatClient {
    /// Some servers ignore `n`; missing candidates are requested again until
    /// the count is reached or a round adds nothing.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, ServiceError> {
        request.validate()?;
        let wanted = request.num_return_sequences as usize;
        let mut out = Vec::with_capacity(wanted);
        while out.len() < wanted {
            let body = self.request_body(request, (wanted - out.len()) as u32);
            let batch = parse_choices(&self.inner.post("v1/chat/completions", &body)?)?;
            if batch.is_empty() {
                return Err(ServiceError::Protocol(format!(
                    "expected {wanted} completions, got {}",
                    out.len()
                )));
            }
            out.extend(batch);
        }
        out.truncate(wanted);
        Ok(out)
    }

    fn max_in_flight(&self) -> usize {
        self.inner.config.max_in_flight
    }
}

/// Client for a `/v1/embeddings` endpoint.
pub struct EmbeddingClient {
    inner: ServiceClient,
}

impl EmbeddingClient {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        Self::with_transport(config, Arc::new(HttpTransport::new()))
    }

    pub fn with_transport(
        config: ServiceConfig,
        transport: Arc<dyn Transport>,
    ) -> Result<Self, ServiceError> {
        Ok(Self {
            inner: ServiceClient::new(config, transport)?,
        })
    }

    fn embed_chunk(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ServiceError> {
        let body = json!({"model": self.inner.config.model, "input": texts});
        let resp = self.inner.post("v1/embeddings", &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ServiceError::Protocol("response has no data array".into()))?;
        if data.len() != texts.len() {
            return Err(ServiceError::Protocol(format!(
                "sent {} inputs, got {} embeddings",
                texts.len(),
                data.len()
            )));
        }
        let mut indexed = Vec::with_capacity(data.len());
        for (pos, entry) in data.iter().enumerate() {
            let index = entry.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
            let values = entry
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ServiceError::Protocol("entry has no embedding".into()))?
                .iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| ServiceError::Protocol("non-numeric embedding".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            indexed.push((index, EmbeddingVector::new(values)?));
        }
        indexed.sort_by_key(|(i, _)| *i);
        Ok(indexed.into_iter().map(|(_, v)| v).collect())
    }
}

impl Embedder for EmbeddingClient {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ServiceError> {
        if texts.is_empty() {
            return Err(ServiceError::InvalidRequest("no texts to embed".into()));
        }
        if let Some(idx) = texts.iter().position(|t| t.is_empty()) {
            return Err(ServiceError::InvalidRequest(format!("text {idx} is empty")));
        }
        let size = self.inner.config.batch_size;
        let chunks: Vec<&[String]> = texts.chunks(size).collect();
        let results = parallel_map(chunks.len(), self.inner.config.max_in_flight, |c| {
            self.embed_chunk(chunks[c])
        });

        let mut out = Vec::with_capacity(texts.len());
        let mut failed = Vec::new();
        let mut message = String::new();
        for (c, result) in results.into_iter().enumerate() {
            match result {
                Ok(vectors) => out.extend(vectors),
                Err(e @ ServiceError::Protocol(_)) => return Err(e),
                Err(e) => {
                    let start = c * size;
                    failed.extend(start..start + chunks[c].len());
                    message = e.to_string();
                }
            }
        }
        if !failed.is_empty() {
            return Err(ServiceError::Batch {
                failed_indices: failed,
                message,
            });
        }
        let dim = out[0].dim();
        if let Some(v) = out.iter().find(|v| v.dim() != dim) {
            return Err(ServiceError::Protocol(format!(
                "embedding dimensions differ: {dim} vs {}",
                v.dim()
            )));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::services::Backoff;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    type Script = Box<dyn Fn(usize, &Value) -> Result<TransportResponse, TransportError> + Send + Sync>;

    /// Scripted transport that also tracks the peak number of concurrent calls.
    struct FakeTransport {
        calls: AtomicUsize,
        in_flight: AtomicUsize,
        peak: AtomicUsize,
        script: Script,
        seen_keys: Mutex<Vec<Option<String>>>,
    }

    impl FakeTransport {
        fn new(script: Script) -> Arc<Self> {
            Arc::new(Self {
                calls: AtomicUsize::new(0),
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                script,
                seen_keys: Mutex::new(Vec::new()),
            })
        }
    }

    impl Transport for FakeTransport {
        fn post_json(
            &self,
            _url: &str,
            api_key: Option<&str>,
            body: &Value,
            _timeout: Duration,
        ) -> Result<TransportResponse, TransportError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            self.seen_keys.lock().unwrap().push(api_key.map(str::to_owned));
            std::thread::sleep(Duration::from_millis(5));
            let call = self.calls.fetch_add(1, Ordering::SeqCst);
            let out = (self.script)(call, body);
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            out
        }
    }

    fn config(max_in_flight: usize) -> ServiceConfig {
        ServiceConfig {
            max_in_flight,
            batch_size: 1,
            max_retries: 2,
            api_key_env_name: String::new(),
            backoff: Backoff {
                initial_ms: 1,
                factor: 2.0,
                max_ms: 4,
                jitter: false,
            },
            ..ServiceConfig::default()
        }
    }

    fn embeddings_for(body: &Value, dim: impl Fn(&str) -> usize) -> TransportResponse {
        let data: Vec<Value> = body["input"]
            .as_array()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let t = t.as_str().unwrap();
                json!({"index": i, "embedding": vec![t.len() as f64; dim(t)]})
            })
            .collect();
        TransportResponse {
            status: 200,
            body: json!({ "data": data }),
        }
    }

    fn ok_chat(n: u64) -> TransportResponse {
        let choices: Vec<Value> = (0..n)
            .rev()
            .map(|i| json!({"index": i, "message": {"content": format!("cand {i}")}}))
            .collect();
        TransportResponse {
            status: 200,
            body: json!({ "choices": choices }),
        }
    }

    fn request(n: u32) -> GenerationRequest {
        GenerationRequest {
            system_text: "sys".into(),
            user_text: "user".into(),
            max_new_tokens: 30,
            num_return_sequences: n,
            temperature: 0.0,
        }
    }

    #[test]
    fn embed_preserves_order_and_arity() {
        let t = FakeTransport::new(Box::new(|_, body| Ok(embeddings_for(body, |_| 8))));
        let client = EmbeddingClient::with_transport(config(2), t).unwrap();
        let out = client
            .embed_batch(&["a".into(), "bbb".into()])
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].values[0], 1.0);
        assert_eq!(out[1].values[0], 3.0);
        assert_eq!(out[0].dim(), out[1].dim());
    }

    #[test]
    fn embed_dimension_mismatch_is_protocol_error() {
        let t = FakeTransport::new(Box::new(|_, body| {
            Ok(embeddings_for(body, |t| if t == "a" { 8 } else { 16 }))
        }));
        let client = EmbeddingClient::with_transport(config(1), t).unwrap();
        let err = client.embed_batch(&["a".into(), "b".into()]).unwrap_err();
        assert!(matches!(err, ServiceError::Protocol(_)), "{err}");
    }

    #[test]
    fn embed_rejects_empty_input() {
        let t = FakeTransport::new(Box::new(|_, body| Ok(embeddings_for(body, |_| 8))));
        let client = EmbeddingClient::with_transport(config(1), t).unwrap();
        assert!(matches!(
            client.embed_batch(&[]),
            Err(ServiceError::InvalidRequest(_))
        ));
        assert!(matches!(
            client.embed_batch(&["".into()]),
            Err(ServiceError::InvalidRequest(_))
        ));
    }

    #[test]
    fn embed_batch_failure_reports_indices() {
        let t = FakeTransport::new(Box::new(|_, body| {
            if body["input"][0] == "bad" {
                Err(TransportError::Connect("refused".into()))
            } else {
                Ok(embeddings_for(body, |_| 4))
            }
        }));
        let client = EmbeddingClient::with_transport(config(1), t).unwrap();
        let err = client
            .embed_batch(&["ok".into(), "bad".into(), "ok".into()])
            .unwrap_err();
        match err {
            ServiceError::Batch { failed_indices, .. } => assert_eq!(failed_indices, [1]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn in_flight_bound_holds() {
        let t = FakeTransport::new(Box::new(|_, body| Ok(embeddings_for(body, |_| 4))));
        let client = EmbeddingClient::with_transport(config(3), t.clone()).unwrap();
        let texts: Vec<String> = (0..40).map(|i| format!("t{i}")).collect();
        let client = Arc::new(client);
        std::thread::scope(|s| {
            for _ in 0..4 {
                let c = client.clone();
                let texts = texts.clone();
                s.spawn(move || c.embed_batch(&texts).unwrap());
            }
        });
        assert_eq!(t.calls.load(Ordering::SeqCst), 160);
        let peak = t.peak.load(Ordering::SeqCst);
        assert!((2..=3).contains(&peak), "peak {peak}");
    }

    #[test]
    fn generate_returns_ranked_candidates() {
        let t = FakeTransport::new(Box::new(|_, body| Ok(ok_chat(body["n"].as_u64().unwrap()))));
        let client = ChatClient::with_transport(config(1), t).unwrap();
        let out = client.generate(&request(10)).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out[0], "cand 0");
        assert_eq!(out[9], "cand 9");
    }

    #[test]
    fn generate_tops_up_when_n_ignored() {
        let t = FakeTransport::new(Box::new(|_, _| Ok(ok_chat(1))));
        let client = ChatClient::with_transport(config(1), t.clone()).unwrap();
        assert_eq!(client.generate(&request(3)).unwrap().len(), 3);
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_timeouts_then_succeeds() {
        let t = FakeTransport::new(Box::new(|call, _| {
            if call < 2 {
                Err(TransportError::Timeout)
            } else {
                Ok(ok_chat(2))
            }
        }));
        let client = ChatClient::with_transport(config(1), t.clone()).unwrap();
        assert_eq!(client.generate(&request(2)).unwrap().len(), 2);
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_on_5xx() {
        let t = FakeTransport::new(Box::new(|_, _| {
            Ok(TransportResponse {
                status: 503,
                body: json!("busy"),
            })
        }));
        let client = ChatClient::with_transport(config(1), t.clone()).unwrap();
        let err = client.generate(&request(1)).unwrap_err();
        assert!(matches!(err, ServiceError::Http { status: 503, .. }));
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_failure_not_retried() {
        let t = FakeTransport::new(Box::new(|_, _| {
            Ok(TransportResponse {
                status: 401,
                body: json!({"error": "bad key"}),
            })
        }));
        let client = ChatClient::with_transport(config(1), t.clone()).unwrap();
        let err = client.generate(&request(1)).unwrap_err();
        assert!(matches!(err, ServiceError::Http { status: 401, .. }));
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn api_key_read_from_named_env_var() {
        std::env::set_var("TERMID_TEST_KEY_VAR", "sekrit");
        let t = FakeTransport::new(Box::new(|_, _| Ok(ok_chat(1))));
        let cfg = ServiceConfig {
            api_key_env_name: "TERMID_TEST_KEY_VAR".into(),
            ..config(1)
        };
        let client = ChatClient::with_transport(cfg, t.clone()).unwrap();
        client.generate(&request(1)).unwrap();
        assert_eq!(t.seen_keys.lock().unwrap()[0].as_deref(), Some("sekrit"));
    }
}
