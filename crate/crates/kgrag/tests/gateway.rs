mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Mutex};
use std::thread;

use kgrag::gateway::{HttpChat, HttpEmbedder};
use kgrag_core::backend::{BackendConfig, BackendKind, ChatBackend, ChatRequest, Embedder, Message, Purpose};
use kgrag_core::pipeline::{Backends, Engine, FrozenClock, Preset};
use kgrag_core::{BackendError, PromptSet, StubEmbedder};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Scripted HTTP server: answers the n-th request with the n-th
/// (status, body) pair, repeating the last one when the script runs out.
struct MockServer {
    addr: SocketAddr,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl MockServer {
    fn start(script: Vec<(u16, Value)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (n, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
                let mut length = 0;
                let mut authorization = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (name, value) = line.split_once(':').unwrap();
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Seen { path, authorization, body: serde_json::from_slice(&body).unwrap() });

                let (status, payload) = script[n.min(script.len() - 1)].clone();
                let payload = payload.to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        MockServer { addr, seen }
    }

    fn config(&self) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::Http,
            base_url: Some(format!("http://{}", self.addr)),
            model: Some("test-model".into()),
            backoff_base_ms: 1,
            max_retries: 3,
            timeout_ms: 5_000,
            ..BackendConfig::default()
        }
    }

    fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn completion(content: &str) -> Value {
    json!({
        "choices": [{"message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": 12, "completion_tokens": 3}
    })
}

fn hello() -> ChatRequest {
    ChatRequest::new(Purpose::Other, vec![Message::system("be brief"), Message::user("hello")])
}

#[test]
fn chat_retries_429_then_succeeds_after_three_attempts() {
    let server = MockServer::start(vec![(429, json!({})), (429, json!({})), (200, completion("hi there"))]);
    let chat = HttpChat::new(&server.config()).unwrap();
    let resp = chat.chat(&hello()).unwrap();
    assert_eq!(resp.content, "hi there");
    assert_eq!(resp.usage.attempts, 3);
    assert_eq!((resp.usage.prompt_tokens, resp.usage.completion_tokens), (12, 3));

    let seen = server.seen();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|s| s.path == "/v1/chat/completions"));
    assert_eq!(seen[0].body["model"], "test-model");
    assert_eq!(seen[0].body["messages"][1], json!({"role": "user", "content": "hello"}));
    assert_eq!(seen[0].authorization, None);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(vec![(400, json!({"error": "bad"})), (200, completion("never"))]);
    let chat = HttpChat::new(&server.config()).unwrap();
    match chat.chat(&hello()) {
        Err(BackendError::Request { status: 400, attempts: 1, .. }) => {}
        other => panic!("expected a 400 request error, got {other:?}"),
    }
    assert_eq!(server.seen().len(), 1);
}

#[test]
fn server_errors_exhaust_retries() {
    let server = MockServer::start(vec![(503, json!({}))]);
    let chat = HttpChat::new(&server.config()).unwrap();
    match chat.chat(&hello()) {
        Err(BackendError::Unavailable { attempts: 4, .. }) => {}
        other => panic!("expected unavailable after 4 attempts, got {other:?}"),
    }
    assert_eq!(server.seen().len(), 4);
}

#[test]
fn unreachable_server_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = BackendConfig {
        kind: BackendKind::Http,
        base_url: Some(format!("http://127.0.0.1:{port}")),
        backoff_base_ms: 1,
        max_retries: 1,
        ..BackendConfig::default()
    };
    let chat = HttpChat::new(&cfg).unwrap();
    assert!(matches!(chat.chat(&hello()), Err(BackendError::Unavailable { attempts: 2, .. })));
}

#[test]
fn api_key_is_sent_as_bearer_token() {
    std::env::set_var("KGRAG_GATEWAY_TEST_KEY", "sk-test");
    let server = MockServer::start(vec![(200, completion("ok"))]);
    let cfg = BackendConfig { api_key_env: Some("KGRAG_GATEWAY_TEST_KEY".into()), ..server.config() };
    HttpChat::new(&cfg).unwrap().chat(&hello()).unwrap();
    assert_eq!(server.seen()[0].authorization.as_deref(), Some("Bearer sk-test"));
}

#[test]
fn embeddings_are_reordered_and_normalized() {
    let server = MockServer::start(vec![(
        200,
        json!({"data": [
            {"index": 1, "embedding": [0.0, 3.0, 4.0]},
            {"index": 0, "embedding": [2.0, 0.0, 0.0]}
        ]}),
    )]);
    let cfg = BackendConfig { dimension: 3, ..server.config() };
    let embedder = HttpEmbedder::new(&cfg).unwrap();
    assert_eq!(embedder.id(), "http:test-model:3");
    let texts = vec!["first".to_string(), "  ".to_string(), "second".to_string()];
    let resp = embedder.embed(&texts).unwrap();
    assert_eq!(resp.vectors, vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]]);
    assert_eq!(resp.empty_inputs, 1);
    let seen = server.seen();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body["input"], json!(["first", "second"]));
}

#[test]
fn embedding_dimension_mismatch_is_malformed() {
    let server = MockServer::start(vec![(200, json!({"data": [{"index": 0, "embedding": [1.0, 0.0]}]}))]);
    let embedder = HttpEmbedder::new(&BackendConfig { dimension: 3, ..server.config() }).unwrap();
    assert!(matches!(embedder.embed(&["x".to_string()]), Err(BackendError::Malformed(_))));
}

#[test]
fn retries_are_recorded_in_the_query_trace() {
    let server = MockServer::start(vec![(429, json!({})), (429, json!({})), (200, completion("Pay online."))]);
    let chat = HttpChat::new(&server.config()).unwrap();
    let embedder = StubEmbedder::default();
    let ws = common::workspace();
    let prompts = PromptSet::default();
    let engine = Engine {
        indices: ws.indices(),
        backends: Backends { chat: &chat, embedder: &embedder },
        prompts: &prompts,
        clock: &FrozenClock,
    };
    let answer = engine.answer("How do I pay my bill?", &Preset::BaselineDense.config()).unwrap();
    assert_eq!(answer.answer, "Pay online.");
    assert_eq!(answer.trace.counters.chat_calls, 1);
    assert_eq!(answer.trace.counters.retries, 2);
}
