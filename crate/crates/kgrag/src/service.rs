//! HTTP query service.
//!
//! `POST /v1/query` answers one question; `GET /v1/health` reports store
//! counts. Requests beyond the concurrency cap are rejected with 429 rather
//! than queued.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgrag_core::pipeline::{Engine, FrozenClock};
use kgrag_core::{PipelineConfig, PipelineError, PromptSet};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::error::{Error, Result};
use crate::gateway::BackendSet;
use crate::runner::{persist_trace, trace_id};
use crate::store::Workspace;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Config used when a request names no preset.
    pub default_config: PipelineConfig,
    pub max_concurrent: usize,
    pub timeout_ms: u64,
    pub trace_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_concurrent == 0 {
            return Err(Error::Usage("max concurrent queries must be at least 1".into()));
        }
        if self.bind.port() == 0 {
            return Err(Error::Usage("port must be in 1..=65535".into()));
        }
        if self.timeout_ms == 0 {
            return Err(Error::Usage("request timeout must be positive".into()));
        }
        self.default_config.validate()?;
        Ok(())
    }
}

pub struct AppState {
    cfg: ServiceConfig,
    backends: BackendSet,
    prompts: PromptSet,
    workspace: RwLock<Option<Arc<Workspace>>>,
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig, backends: BackendSet, prompts: PromptSet) -> Arc<Self> {
        let permits = Arc::new(Semaphore::new(cfg.max_concurrent.max(1)));
        Arc::new(AppState { cfg, backends, prompts, workspace: RwLock::new(None), permits })
    }

    /// Makes the stores visible to requests; health turns 200 afterwards.
    pub fn set_workspace(&self, ws: Workspace) -> Result<()> {
        ws.check_embedder(self.backends.embedder.as_ref())?;
        *self.workspace.write().unwrap() = Some(Arc::new(ws));
        Ok(())
    }

    fn workspace(&self) -> Option<Arc<Workspace>> {
        self.workspace.read().unwrap().clone()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub question: String,
    #[serde(default)]
    pub preset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub answer: String,
    /// Chunk ids handed to the generator, in assembly order.
    pub contexts: Vec<String>,
    pub trace_id: String,
}

fn error(status: StatusCode, message: impl Into<String>, trace_id: Option<String>) -> Response {
    let mut body = json!({ "error": message.into() });
    if let Some(id) = trace_id {
        body["trace_id"] = json!(id);
    }
    (status, Json(body)).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new().route("/v1/query", post(handle_query)).route("/v1/health", get(handle_health)).with_state(state)
}

async fn handle_health(State(state): State<Arc<AppState>>) -> Response {
    match state.workspace() {
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading"}))).into_response(),
        Some(ws) => {
            let c = ws.counts();
            Json(json!({"status": "ok", "chunks": c.chunks, "entities": c.entities, "relations": c.relations}))
                .into_response()
        }
    }
}

fn status_for(err: &PipelineError) -> StatusCode {
    match err {
        PipelineError::EmptyQuery | PipelineError::Config(_) => StatusCode::BAD_REQUEST,
        PipelineError::Embedding(_) | PipelineError::Generation(_) => StatusCode::BAD_GATEWAY,
        PipelineError::Retrieval(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn handle_query(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: QueryRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid request body: {e}"), None),
    };
    if req.question.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "question is empty", None);
    }
    let cfg = match &req.preset {
        None => state.cfg.default_config.clone(),
        Some(name) => match kgrag_core::preset(name) {
            Ok(mut cfg) => {
                cfg.backends = state.cfg.default_config.backends.clone();
                cfg
            }
            Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string(), None),
        },
    };
    let Some(ws) = state.workspace() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "stores are not loaded", None);
    };
    let Ok(permit) = Arc::clone(&state.permits).try_acquire_owned() else {
        return error(StatusCode::TOO_MANY_REQUESTS, "too many concurrent queries", None);
    };

    let worker_state = Arc::clone(&state);
    // The permit moves into the blocking task so a timed-out request keeps
    // its slot until the work actually stops.
    let task = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let engine = Engine {
            indices: ws.indices(),
            backends: worker_state.backends.as_core(),
            prompts: &worker_state.prompts,
            clock: &FrozenClock,
        };
        let result = engine.answer(&req.question, &cfg);
        let trace = match &result {
            Ok(a) => &a.trace,
            Err(f) => &f.trace,
        };
        let id = match &worker_state.cfg.trace_dir {
            Some(dir) => persist_trace(dir, trace).unwrap_or_else(|_| trace_id(trace)),
            None => trace_id(trace),
        };
        (result, id)
    });
    let timeout = Duration::from_millis(state.cfg.timeout_ms);
    match tokio::time::timeout(timeout, task).await {
        Err(_) => error(StatusCode::GATEWAY_TIMEOUT, "query timed out", None),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("query task failed: {e}"), None),
        Ok(Ok((Ok(answer), id))) => {
            Json(QueryResponse { contexts: answer.trace.context_ids(), answer: answer.answer, trace_id: id })
                .into_response()
        }
        Ok(Ok((Err(failure), id))) => error(status_for(&failure.error), failure.error.to_string(), Some(id)),
    }
}

/// Binds and serves until ctrl-c. The workspace is loaded by `load` on a
/// blocking thread after the listener is up, so health reports 503 until
/// it finishes.
pub async fn serve(state: Arc<AppState>, load: impl FnOnce() -> Result<Workspace> + Send + 'static) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(state.cfg.bind)
        .await
        .map_err(|e| Error::Usage(format!("cannot bind {}: {e}", state.cfg.bind)))?;
    let loader = Arc::clone(&state);
    let loading = tokio::task::spawn_blocking(move || load().and_then(|ws| loader.set_workspace(ws)));
    let server = axum::serve(listener, router(state)).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    let serving = tokio::spawn(async move { server.await });
    match loading.await {
        Ok(Ok(())) => {}
        Ok(Err(e)) => {
            serving.abort();
            return Err(e);
        }
        Err(e) => {
            serving.abort();
            return Err(Error::Internal(format!("loading stores failed: {e}")));
        }
    }
    serving
        .await
        .map_err(|e| Error::Internal(format!("server task failed: {e}")))?
        .map_err(|e| Error::Internal(format!("server error: {e}")))
}
