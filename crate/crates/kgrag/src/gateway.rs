//! Chat and embedding clients for OpenAI-compatible servers, plus
//! construction of the stub backends from a [`BackendConfig`].

use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use kgrag_core::backend::{
    check_embed_inputs, normalize, BackendKind, ChatRequest, ChatResponse, EmbedResponse, ResponseSource, Usage,
};
use kgrag_core::pipeline::BackendPair;
use kgrag_core::{BackendConfig, BackendError, ChatBackend, Embedder, StubChat, StubEmbedder};
use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use crate::error::Result;
use crate::io;

/// Counting gate that bounds concurrent requests per backend.
#[derive(Debug)]
pub struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightPermit<'a>(&'a InFlight);

impl InFlight {
    pub fn new(cap: usize) -> Self {
        InFlight { cap: cap.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        InFlightPermit(self)
    }

    pub fn in_use(&self) -> usize {
        *self.used.lock().unwrap()
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub jitter: f64,
}

impl RetryPolicy {
    pub fn from_config(cfg: &BackendConfig) -> Self {
        RetryPolicy {
            max_retries: cfg.max_retries,
            base: Duration::from_millis(cfg.backoff_base_ms),
            jitter: cfg.backoff_jitter,
        }
    }

    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`
    /// scaled by a factor drawn from `[1 - jitter, 1 + jitter]`.
    pub fn delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let exp = self.base.saturating_mul(1u32 << (retry.saturating_sub(1)).min(16));
        let factor = if self.jitter > 0.0 { 1.0 + rng.gen_range(-self.jitter..=self.jitter) } else { 1.0 };
        exp.mul_f64(factor)
    }
}

enum Attempt {
    Done(Value),
    Retry(String),
    Fatal(BackendError),
}

/// Shared transport: POSTs JSON with bearer auth, retrying timeouts,
/// connection failures, 429 and 5xx.
pub struct HttpTransport {
    client: Client,
    base_url: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    gate: InFlight,
}

impl HttpTransport {
    pub fn new(cfg: &BackendConfig) -> Result<Self> {
        cfg.validate()?;
        let base_url = cfg.base_url.clone().unwrap_or_default().trim_end_matches('/').to_string();
        let api_key = match &cfg.api_key_env {
            Some(name) => Some(std::env::var(name).map_err(|_| {
                BackendError::Config(format!("environment variable {name} with the API key is not set"))
            })?),
            None => None,
        };
        let client = Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpTransport {
            client,
            base_url,
            api_key,
            policy: RetryPolicy::from_config(cfg),
            gate: InFlight::new(cfg.max_in_flight),
        })
    }

    fn once(&self, url: &str, body: &Value) -> Attempt {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Attempt::Retry(format!("status {}: {}", status.as_u16(), snippet(&text)));
        }
        if !status.is_success() {
            return Attempt::Fatal(BackendError::Request {
                status: status.as_u16(),
                message: snippet(&text),
                attempts: 0,
            });
        }
        match serde_json::from_str(&text) {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fatal(BackendError::Malformed(format!("invalid JSON: {e}"))),
        }
    }

    /// Returns the parsed body and the number of attempts made.
    pub fn post(&self, path: &str, body: &Value) -> std::result::Result<(Value, u32), BackendError> {
        let url = format!("{}{path}", self.base_url);
        let _permit = self.gate.acquire();
        let mut rng = rand::thread_rng();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.once(&url, body) {
                Attempt::Done(v) => return Ok((v, attempts)),
                Attempt::Fatal(BackendError::Request { status, message, .. }) => {
                    return Err(BackendError::Request { status, message, attempts })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(message) => {
                    if attempts > self.policy.max_retries {
                        return Err(BackendError::Unavailable { attempts, message });
                    }
                    thread::sleep(self.policy.delay(attempts, &mut rng));
                }
            }
        }
    }

    pub fn in_flight(&self) -> usize {
        self.gate.in_use()
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(300).collect()
}

pub struct HttpChat {
    transport: HttpTransport,
    model: Option<String>,
}

impl HttpChat {
    pub fn new(cfg: &BackendConfig) -> Result<Self> {
        Ok(HttpChat { transport: HttpTransport::new(cfg)?, model: cfg.model.clone() })
    }
}

impl ChatBackend for HttpChat {
    fn chat(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, BackendError> {
        req.validate()?;
        let messages: Vec<Value> =
            req.messages.iter().map(|m| json!({"role": m.role.as_str(), "content": m.content})).collect();
        let mut body = json!({"messages": messages, "temperature": req.temperature});
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let (v, attempts) = self.transport.post("/v1/chat/completions", &body)?;
        let content = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
        let count = |k: &str| v["usage"][k].as_u64().unwrap_or(0);
        Ok(ChatResponse {
            content: content.chars().take(req.max_output_chars).collect(),
            usage: Usage {
                prompt_tokens: count("prompt_tokens"),
                completion_tokens: count("completion_tokens"),
                attempts,
            },
            source: ResponseSource::Remote,
        })
    }
}

pub struct HttpEmbedder {
    transport: HttpTransport,
    model: Option<String>,
    dimension: usize,
}

impl HttpEmbedder {
    pub fn new(cfg: &BackendConfig) -> Result<Self> {
        Ok(HttpEmbedder { transport: HttpTransport::new(cfg)?, model: cfg.model.clone(), dimension: cfg.dimension })
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn id(&self) -> String {
        format!("http:{}:{}", self.model.as_deref().unwrap_or("default"), self.dimension)
    }

    /// Empty strings are not sent; they map to e0 like the stub.
    fn embed(&self, texts: &[String]) -> std::result::Result<EmbedResponse, BackendError> {
        check_embed_inputs(texts)?;
        let sent: Vec<&str> = texts.iter().map(String::as_str).filter(|t| !t.trim().is_empty()).collect();
        let empty_inputs = texts.len() - sent.len();
        let mut vectors_sent: Vec<Vec<f32>> = Vec::new();
        let mut attempts = 0;
        if !sent.is_empty() {
            let mut body = json!({"input": sent});
            if let Some(model) = &self.model {
                body["model"] = json!(model);
            }
            let (v, n) = self.transport.post("/v1/embeddings", &body)?;
            attempts = n;
            let data = v["data"].as_array().ok_or_else(|| BackendError::Malformed("missing data array".into()))?;
            if data.len() != sent.len() {
                return Err(BackendError::Malformed(format!("{} embeddings for {} inputs", data.len(), sent.len())));
            }
            let mut indexed: Vec<(u64, Vec<f32>)> = Vec::with_capacity(data.len());
            for (pos, item) in data.iter().enumerate() {
                let index = item["index"].as_u64().unwrap_or(pos as u64);
                let raw =
                    item["embedding"].as_array().ok_or_else(|| BackendError::Malformed("missing embedding".into()))?;
                let mut vec: Vec<f32> = raw.iter().map(|x| x.as_f64().unwrap_or(f64::NAN) as f32).collect();
                if vec.len() != self.dimension {
                    return Err(BackendError::Malformed(format!(
                        "embedding has dimension {}, configured {}",
                        vec.len(),
                        self.dimension
                    )));
                }
                if vec.iter().any(|x| !x.is_finite()) {
                    return Err(BackendError::Malformed("non-numeric embedding component".into()));
                }
                normalize(&mut vec);
                indexed.push((index, vec));
            }
            indexed.sort_by_key(|(i, _)| *i);
            vectors_sent = indexed.into_iter().map(|(_, v)| v).collect();
        }
        let mut e0 = vec![0.0; self.dimension];
        e0[0] = 1.0;
        let mut remote = vectors_sent.into_iter();
        let vectors = texts
            .iter()
            .map(|t| if t.trim().is_empty() { e0.clone() } else { remote.next().expect("one vector per sent text") })
            .collect();
        Ok(EmbedResponse { vectors, attempts: attempts.max(1), empty_inputs })
    }
}

pub fn connect_chat(cfg: &BackendConfig) -> Result<Arc<dyn ChatBackend>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::Http => Arc::new(HttpChat::new(cfg)?),
        BackendKind::Stub => {
            let fixtures = match &cfg.fixtures {
                Some(path) => io::load_stub_fixtures(Path::new(path))?,
                None => Default::default(),
            };
            Arc::new(StubChat::with_fixtures(fixtures))
        }
    })
}

pub fn connect_embedder(cfg: &BackendConfig) -> Result<Arc<dyn Embedder>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::Http => Arc::new(HttpEmbedder::new(cfg)?),
        BackendKind::Stub => Arc::new(StubEmbedder::new(cfg.dimension)),
    })
}

/// Owned backend handles for one pipeline config.
#[derive(Clone)]
pub struct BackendSet {
    pub chat: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn Embedder>,
}

impl BackendSet {
    pub fn connect(pair: &BackendPair) -> Result<Self> {
        Ok(BackendSet { chat: connect_chat(&pair.chat)?, embedder: connect_embedder(&pair.embed)? })
    }

    pub fn stub() -> Self {
        BackendSet { chat: Arc::new(StubChat::new()), embedder: Arc::new(StubEmbedder::default()) }
    }

    pub fn as_core(&self) -> kgrag_core::pipeline::Backends<'_> {
        kgrag_core::pipeline::Backends { chat: self.chat.as_ref(), embedder: self.embedder.as_ref() }
    }
}
