//! Golden request/response fixtures, replayed in file order against one
//! in-memory store under the mock provider. Set `THREADMEM_BLESS=1` to
//! rewrite the expected responses.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use threadmem::provider::mock::{MockEmbedder, ScriptedChat};
use threadmem::provider::Provider;
use threadmem::store::{MemoryStore, StoreConfig};
use threadmem_service::api::{router, AppState};
use tower::ServiceExt;

fn app(provider: Provider, token: Option<&str>) -> Router {
    let store = MemoryStore::in_memory(Arc::new(provider), StoreConfig::default());
    router(AppState { store: Arc::new(store), token: token.map(String::from) })
}

async fn call(app: &Router, method: &str, path: &str, body: Option<String>, auth: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(path);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    if let Some(t) = auth {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

fn fixtures() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/api");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

#[tokio::test]
async fn golden_fixtures() {
    let app = app(Provider::mock(64, 7), None);
    let bless = std::env::var("THREADMEM_BLESS").is_ok_and(|v| v == "1");
    let mut seed0 = String::new();
    let mut failures = Vec::new();
    for file in fixtures() {
        let mut fx: Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
        let req = &fx["request"];
        let path = req["path"].as_str().unwrap().replace("{seed0}", &seed0);
        let body = match (&req["body"], &req["raw_body"]) {
            (Value::Null, Value::String(raw)) => Some(raw.clone()),
            (Value::Null, _) => None,
            (b, _) => Some(b.to_string()),
        };
        let (status, got) = call(&app, req["method"].as_str().unwrap(), &path, body, None).await;
        if let Some(id) = got["seeds"][0]["id"].as_str() {
            seed0 = id.to_owned();
        }
        if bless {
            fx["status"] = json!(status.as_u16());
            fx["response"] = got;
            std::fs::write(&file, serde_json::to_string_pretty(&fx).unwrap() + "\n").unwrap();
        } else if fx["status"] != json!(status.as_u16()) || fx["response"] != got {
            failures.push(format!("{}: got {status} {}", file.display(), serde_json::to_string_pretty(&got).unwrap()));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n\n"));
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let app = app(Provider::mock(16, 1), Some("sesame"));
    let (status, body) = call(&app, "GET", "/v1/stats", None, None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "unauthorized");
    let (status, _) = call(&app, "GET", "/v1/stats", None, Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, body) = call(&app, "GET", "/v1/stats", None, Some("sesame")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["live_nodes"], 0);
}

#[tokio::test]
async fn provider_outage_is_503() {
    let provider = Provider::new(Arc::new(ScriptedChat::new(Vec::<String>::new())), Arc::new(MockEmbedder::new(16, 1)));
    let app = app(provider, None);
    let (status, body) = call(&app, "POST", "/v1/agent/query", Some(json!({ "query": "anything" }).to_string()), None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{body}");
    assert_eq!(body["code"], "provider_unavailable");
    assert!(body["message"].is_string());
}

#[tokio::test]
async fn unknown_route_is_404_json() {
    let app = app(Provider::mock(16, 1), None);
    let (status, body) = call(&app, "GET", "/v1/nope", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}
