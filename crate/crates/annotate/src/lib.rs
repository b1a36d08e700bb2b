//! HTTP annotation service: annotators judge whether a model output is a
//! valid extraction; verdicts are persisted before they are acknowledged.
//!
//! Routes:
//! - `POST /sessions` `{items, options}` → `{session_id}`
//! - `GET /sessions/{id}/next?annotator=A` → `{item}` or `{done: true}`
//! - `POST /sessions/{id}/verdicts` `{item_id, annotator, verdict}` → `{ok: true}`
//! - `GET /sessions/{id}/progress?annotator=A` → `{answered, total}`
//! - `GET /sessions/{id}/export` → labeled JSONL records then `{"summary": …}`

pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use causalign::metrics::Verdict;
use serde::Deserialize;
use serde_json::json;

pub use store::{AnnotationItem, AnnotationRecord, ExportSummary, Progress, SessionOptions, Store, StoreError};

pub const PORT_ENV: &str = "CAUSALIGN_ANNOTATE_PORT";
pub const DATA_DIR_ENV: &str = "CAUSALIGN_ANNOTATE_DATA_DIR";
pub const DEFAULT_PORT: u16 = 8080;

/// Service settings; environment variables take precedence over the
/// values passed in.
#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub port: u16,
    pub data_dir: PathBuf,
}

impl ServeConfig {
    pub fn with_env_overrides(mut self) -> Result<Self, String> {
        if let Ok(p) = std::env::var(PORT_ENV) {
            self.port = p.parse().map_err(|e| format!("{PORT_ENV}={p}: {e}"))?;
        }
        if let Ok(d) = std::env::var(DATA_DIR_ENV) {
            self.data_dir = PathBuf::from(d);
        }
        Ok(self)
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::UnknownSession(_) | StoreError::UnknownItem(_) => StatusCode::NOT_FOUND,
            StoreError::Io(_) | StoreError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(code, e.to_string())
    }
}

fn bad_request(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.to_string())
}

#[derive(Deserialize)]
struct CreateRequest {
    items: Vec<AnnotationItem>,
    #[serde(default)]
    options: SessionOptions,
}

#[derive(Deserialize)]
struct VerdictRequest {
    item_id: String,
    annotator: String,
    verdict: String,
}

#[derive(Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

fn annotator(q: AnnotatorQuery) -> Result<String, ApiError> {
    q.annotator.filter(|a| !a.trim().is_empty()).ok_or_else(|| bad_request("missing annotator query parameter"))
}

// Bodies are parsed by hand so malformed input gets a 400 with a JSON error.
fn parse_body<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, ApiError> {
    serde_json::from_str(body).map_err(|e| bad_request(format!("malformed request: {e}")))
}

async fn create_session(State(store): State<Arc<Store>>, body: String) -> Result<impl IntoResponse, ApiError> {
    let req: CreateRequest = parse_body(&body)?;
    let id = tokio::task::spawn_blocking(move || store.create_session(req.items, req.options))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn next_item(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let who = annotator(q)?;
    let session = store.session(&id)?;
    let s = session.lock().expect("session lock poisoned");
    Ok(Json(match s.next_item(&who) {
        Some(item) => json!({ "item": item }),
        None => json!({ "done": true }),
    }))
}

async fn submit_verdict(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    body: String,
) -> Result<impl IntoResponse, ApiError> {
    let req: VerdictRequest = parse_body(&body)?;
    let verdict: Verdict = req.verdict.parse().map_err(bad_request)?;
    let session = store.session(&id)?;
    tokio::task::spawn_blocking(move || {
        let mut s = session.lock().expect("session lock poisoned");
        s.submit(&req.item_id, &req.annotator, verdict)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({ "ok": true })))
}

async fn progress(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let who = annotator(q)?;
    let session = store.session(&id)?;
    let p = session.lock().expect("session lock poisoned").progress(&who);
    Ok(Json(p))
}

async fn export(State(store): State<Arc<Store>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let session = store.session(&id)?;
    let body = session.lock().expect("session lock poisoned").export_jsonl();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/verdicts", post(submit_verdict))
        .route("/sessions/{id}/progress", get(progress))
        .route("/sessions/{id}/export", get(export))
        .with_state(store)
}

/// Bind to `addr` and serve until the process ends.
pub async fn serve(addr: SocketAddr, data_dir: PathBuf) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let store = Arc::new(Store::open(data_dir)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await?;
    Ok(())
}
