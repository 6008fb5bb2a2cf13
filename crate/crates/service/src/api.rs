//! HTTP routes. Store calls block, so every handler hops onto the blocking
//! pool; the store itself serializes writers.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use threadmem::model::NodeId;
use threadmem::pipeline::DialogueTurn;
use threadmem::store::{ErrorClass, MemoryStore, StoreError};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<MemoryStore>,
    /// Required bearer token, if any.
    pub token: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), detail: Value::Null }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, code) = match e.class() {
            ErrorClass::Validation => (StatusCode::BAD_REQUEST, "validation"),
            ErrorClass::NotFound => (StatusCode::NOT_FOUND, "not_found"),
            ErrorClass::Conflict => (StatusCode::CONFLICT, "conflict"),
            ErrorClass::Provider => (StatusCode::SERVICE_UNAVAILABLE, "provider_unavailable"),
            ErrorClass::Internal => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let mut causes = Vec::new();
        let mut src = std::error::Error::source(&e);
        while let Some(c) = src {
            causes.push(c.to_string());
            src = c.source();
        }
        let detail = if causes.is_empty() { Value::Null } else { json!({ "causes": causes }) };
        ApiError { status, code, message: e.to_string(), detail }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    let out = tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(out).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/turns", post(turns))
        .route("/v1/batch", post(batch))
        .route("/v1/retrieve", get(retrieve))
        .route("/v1/agent/query", post(agent_query))
        .route("/v1/nodes/{id}", get(get_node).delete(delete_node))
        .route("/v1/admin/rebuild", post(rebuild))
        .route("/v1/admin/check", get(check))
        .route("/v1/stats", get(stats))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn turns(State(s): State<AppState>, body: Result<Json<DialogueTurn>, JsonRejection>) -> ApiResult {
    let Json(turn) = body?;
    blocking(move || Ok(s.store.ingest_turn(&turn)?)).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchBody {
    turns: Vec<DialogueTurn>,
}

async fn batch(State(s): State<AppState>, body: Result<Json<BatchBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    blocking(move || Ok(s.store.ingest_batch(b.turns)?)).await
}

#[derive(Debug, Deserialize)]
struct RetrieveParams {
    q: String,
    k: Option<usize>,
    depth: Option<usize>,
}

async fn retrieve(State(s): State<AppState>, params: Result<Query<RetrieveParams>, QueryRejection>) -> ApiResult {
    let Query(p) = params?;
    let mut cfg = s.store.config().read.clone();
    if let Some(k) = p.k {
        if k == 0 {
            return Err(ApiError::bad_request("k must be positive"));
        }
        cfg.seed_k = k;
    }
    if let Some(d) = p.depth {
        cfg.max_depth = d;
    }
    blocking(move || Ok(s.store.retrieve(&p.q, Some(&cfg))?)).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentBody {
    query: String,
    max_iterations: Option<usize>,
}

async fn agent_query(State(s): State<AppState>, body: Result<Json<AgentBody>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    blocking(move || Ok(s.store.agent_query(&b.query, b.max_iterations)?)).await
}

#[derive(Debug, Deserialize)]
struct NodeParams {
    #[serde(default)]
    threads: u8,
}

async fn get_node(
    State(s): State<AppState>,
    Path(id): Path<String>,
    params: Result<Query<NodeParams>, QueryRejection>,
) -> ApiResult {
    let Query(p) = params?;
    blocking(move || {
        let id = NodeId::new(&id);
        let node = s
            .store
            .node(&id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown node id {}", id.as_str())))?;
        let threads = if p.threads != 0 { Some(s.store.threads(&id)?) } else { None };
        Ok(json!({ "node": node, "threads": threads }))
    })
    .await
}

async fn delete_node(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    blocking(move || Ok(s.store.delete(&NodeId::new(&id))?)).await
}

async fn rebuild(State(s): State<AppState>) -> ApiResult {
    blocking(move || Ok(s.store.rebuild()?)).await
}

async fn check(State(s): State<AppState>) -> ApiResult {
    blocking(move || Ok(json!({ "violations": s.store.check() }))).await
}

async fn stats(State(s): State<AppState>) -> ApiResult {
    blocking(move || Ok(s.store.stats())).await
}
