//! Chat and embedding backend abstractions plus the deterministic stubs used
//! for offline runs.
//!
//! The HTTP implementations live in the std companion crate; everything here
//! is pure.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::BackendError;
use crate::text::{fnv1a64, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
}

/// What a chat call is for. Not sent over the wire; lets traces and test
/// backends tell calls apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Rewrite,
    SubQueries,
    Generate,
    Extract,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_chars: usize,
    pub purpose: Purpose,
}

impl ChatRequest {
    pub fn new(purpose: Purpose, messages: Vec<Message>) -> Self {
        ChatRequest { messages, temperature: 0.0, max_output_chars: 4000, purpose }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.messages.first() {
            None => Err(BackendError::Config("chat request has no messages".into())),
            Some(m) if m.role == Role::Assistant => {
                Err(BackendError::Config("first message must be system or user".into()))
            }
            Some(_) => Ok(()),
        }
    }

    pub fn last_user_content(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSource {
    Remote,
    Fixture,
    Echo,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Total attempts including retries.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: Usage,
    pub source: ResponseSource,
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f32>>,
    pub attempts: u32,
    /// Inputs that were empty and mapped to the fallback basis vector.
    pub empty_inputs: usize,
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// Identifier recorded in index manifests.
    fn id(&self) -> String;

    fn embed(&self, texts: &[String]) -> Result<EmbedResponse, BackendError>;

    fn embed_one(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let mut resp = self.embed(&[String::from(text)])?;
        resp.vectors.pop().ok_or_else(|| BackendError::Malformed("no vector returned".into()))
    }
}

pub const MAX_EMBED_CHARS: usize = 8000;

pub fn check_embed_inputs(texts: &[String]) -> Result<(), BackendError> {
    if texts.is_empty() {
        return Err(BackendError::Config("embedding request has no texts".into()));
    }
    if let Some(t) = texts.iter().find(|t| t.chars().count() > MAX_EMBED_CHARS) {
        return Err(BackendError::Config(format!(
            "embedding input of {} chars exceeds {MAX_EMBED_CHARS}",
            t.chars().count()
        )));
    }
    Ok(())
}

/// L2-normalizes in place; a zero vector becomes e₀. Returns false when the
/// input was degenerate.
pub fn normalize(vec: &mut [f32]) -> bool {
    let norm = libm::sqrt(vec.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>());
    if norm == 0.0 || !norm.is_finite() {
        vec.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = vec.first_mut() {
            *first = 1.0;
        }
        return false;
    }
    for x in vec.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    true
}

/// Key under which stub chat fixtures are stored: SHA-256 (lowercase hex) of
/// every message's `role + "\n" + content`, concatenated in order.
pub fn prompt_sha256(messages: &[Message]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.as_str().as_bytes());
        hasher.update(b"\n");
        hasher.update(m.content.as_bytes());
    }
    to_hex(&hasher.finalize())
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

fn to_hex(digest: &[u8]) -> String {
    let mut hex = String::with_capacity(digest.len() * 2);
    for b in digest {
        hex.push(char::from_digit(u32::from(b >> 4), 16).unwrap());
        hex.push(char::from_digit(u32::from(b & 0xf), 16).unwrap());
    }
    hex
}

/// Deterministic chat: fixture lookup by prompt hash, echo otherwise.
#[derive(Debug, Clone, Default)]
pub struct StubChat {
    fixtures: BTreeMap<String, String>,
}

pub const ECHO_PREFIX: &str = "ECHO: ";

impl StubChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fixtures(fixtures: BTreeMap<String, String>) -> Self {
        StubChat { fixtures }
    }

    pub fn insert(&mut self, messages: &[Message], response: impl Into<String>) {
        self.fixtures.insert(prompt_sha256(messages), response.into());
    }

    pub fn fixtures(&self) -> &BTreeMap<String, String> {
        &self.fixtures
    }
}

impl ChatBackend for StubChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let usage = Usage { attempts: 1, ..Usage::default() };
        Ok(match self.fixtures.get(&prompt_sha256(&req.messages)) {
            Some(content) => ChatResponse { content: content.clone(), usage, source: ResponseSource::Fixture },
            None => ChatResponse {
                content: format!("{ECHO_PREFIX}{}", req.last_user_content()),
                usage,
                source: ResponseSource::Echo,
            },
        })
    }
}

pub const STUB_DIMENSION: usize = 256;

/// Bag-of-tokens feature hashing: FNV-1a 64 per token, bucket = hash mod d,
/// counts L2-normalized. No tokens maps to e₀.
#[derive(Debug, Clone, Copy)]
pub struct StubEmbedder {
    dimension: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        StubEmbedder { dimension: STUB_DIMENSION }
    }
}

impl StubEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        StubEmbedder { dimension }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dimension as u64) as usize
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dimension];
        for token in tokenize(text) {
            v[self.bucket(&token)] += 1.0;
        }
        normalize(&mut v);
        v
    }
}

impl Embedder for StubEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn id(&self) -> String {
        format!("stub-fnv1a-{}", self.dimension)
    }

    fn embed(&self, texts: &[String]) -> Result<EmbedResponse, BackendError> {
        check_embed_inputs(texts)?;
        let empty_inputs = texts.iter().filter(|t| tokenize(t).is_empty()).count();
        Ok(EmbedResponse { vectors: texts.iter().map(|t| self.vector(t)).collect(), attempts: 1, empty_inputs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Stub,
}

/// Connection settings for one backend. Construction of live clients from
/// this happens outside the core crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub model: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Relative jitter applied to each backoff delay (0.25 = ±25%).
    pub backoff_jitter: f64,
    pub max_in_flight: usize,
    /// Stub chat fixtures (JSON Lines of prompt hash → response).
    pub fixtures: Option<String>,
    /// Embedding dimension for the stub embedder.
    pub dimension: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Stub,
            base_url: None,
            api_key_env: None,
            model: None,
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: 500,
            backoff_jitter: 0.25,
            max_in_flight: 8,
            fixtures: None,
            dimension: STUB_DIMENSION,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind == BackendKind::Http && self.base_url.as_deref().is_none_or(str::is_empty) {
            return Err(BackendError::Config("http backend requires base_url".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if self.dimension == 0 {
            return Err(BackendError::Config("dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.backoff_jitter) {
            return Err(BackendError::Config("backoff_jitter must be in [0, 1)".into()));
        }
        Ok(())
    }
}
