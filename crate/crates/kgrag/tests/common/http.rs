use std::net::SocketAddr;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use kgrag::service::{router, AppState, ServiceConfig};
use kgrag_core::backend::{ChatBackend, ChatRequest, ChatResponse};
use kgrag_core::pipeline::PipelineConfig;
use kgrag_core::{BackendError, StubChat};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::Value;

pub fn service_config(default_config: PipelineConfig, max_concurrent: usize, timeout_ms: u64) -> ServiceConfig {
    ServiceConfig {
        bind: "127.0.0.1:8080".parse().unwrap(),
        default_config,
        max_concurrent,
        timeout_ms,
        trace_dir: None,
    }
}

/// Serves the router on an ephemeral port from a background runtime.
pub fn spawn(state: Arc<AppState>) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(state)).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

pub struct Service {
    pub addr: SocketAddr,
    pub client: Client,
}

impl Service {
    pub fn start(state: Arc<AppState>) -> Self {
        Service { addr: spawn(state), client: Client::builder().timeout(Duration::from_secs(30)).build().unwrap() }
    }

    pub fn health(&self) -> (StatusCode, Value) {
        let resp = self.client.get(format!("http://{}/v1/health", self.addr)).send().unwrap();
        (resp.status(), resp.json().unwrap())
    }

    pub fn query_raw(&self, body: &str) -> (StatusCode, Value) {
        let resp = self
            .client
            .post(format!("http://{}/v1/query", self.addr))
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .unwrap();
        (resp.status(), resp.json().unwrap_or(Value::Null))
    }

    pub fn query(&self, body: Value) -> (StatusCode, Value) {
        self.query_raw(&body.to_string())
    }
}

/// Chat backend that parks every caller until released.
#[derive(Default)]
pub struct BlockingChat {
    state: Mutex<(usize, bool)>,
    changed: Condvar,
}

impl BlockingChat {
    pub fn wait_for_entrants(&self, n: usize) {
        let guard = self.state.lock().unwrap();
        let (guard, timeout) =
            self.changed.wait_timeout_while(guard, Duration::from_secs(20), |(entered, _)| *entered < n).unwrap();
        assert!(!timeout.timed_out(), "only {} callers arrived", guard.0);
    }

    pub fn release(&self) {
        self.state.lock().unwrap().1 = true;
        self.changed.notify_all();
    }
}

impl ChatBackend for BlockingChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut guard = self.state.lock().unwrap();
        guard.0 += 1;
        self.changed.notify_all();
        let _guard = self.changed.wait_while(guard, |(_, released)| !*released).unwrap();
        StubChat::new().chat(req)
    }
}
