//! HTTP JSON front end for [`qagen_core::annotation::AnnotationStore`].
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | [`CreateSession`] | 201 [`SessionCreated`] |
//! | GET | `/sessions/{id}/next?judge=J` | | [`NextItem`] |
//! | POST | `/sessions/{id}/judgments` | [`SubmitJudgment`] | [`Ack`] |
//! | GET | `/sessions/{id}/stats` | | blinded [`SessionStats`] |
//! | GET | `/health` | | `{"status":"ok"}` |
//!
//! Every payload carries `version` ([`PAYLOAD_VERSION`]). Errors are
//! `{"version", "error", "message"}` with status 400 (malformed), 401 (bad
//! token), 404 (unknown session, judge or item), 409 (conflict) or 500.
//! When a token is configured, every route except `/health` requires it as
//! `Authorization: Bearer <token>` or `X-Judge-Token: <token>`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use qagen_core::annotation::{
    create_session, Ack, AnnotationError, AnnotationStore, Judgment, NextItem, SessionSpec, SessionStats, SystemOutputs,
    Verdict, PAYLOAD_VERSION,
};

pub const TOKEN_HEADER: &str = "x-judge-token";

fn current_version() -> u32 {
    PAYLOAD_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default = "current_version")]
    pub version: u32,
    pub systems: Vec<SystemOutputs>,
    pub spec: SessionSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub version: u32,
    pub session_id: String,
    pub total_items: usize,
    pub judges: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitJudgment {
    #[serde(default = "current_version")]
    pub version: u32,
    pub item_id: String,
    pub judge_id: String,
    pub verdict: Verdict,
    /// Server time is used when absent.
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub version: u32,
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let (status, code) = match &e {
            AnnotationError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            AnnotationError::UnknownJudge { .. } => (StatusCode::NOT_FOUND, "unknown_judge"),
            AnnotationError::UnknownItem { .. } => (StatusCode::NOT_FOUND, "unknown_item"),
            AnnotationError::NotAssigned { .. } => (StatusCode::CONFLICT, "not_assigned"),
            AnnotationError::Exists(_) => (StatusCode::CONFLICT, "session_exists"),
            AnnotationError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid_session"),
            AnnotationError::SampleSize { .. } => (StatusCode::BAD_REQUEST, "sample_size"),
            AnnotationError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "annotation store failure");
        }
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { version: PAYLOAD_VERSION, error: self.code.into(), message: self.message };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    /// Shared judge token; `None` leaves the API open.
    pub token: Option<String>,
    /// Allowed browser origin; `None` allows any.
    pub cors_origin: Option<String>,
}

#[derive(Clone)]
struct AppState {
    store: Arc<AnnotationStore>,
    token: Option<Arc<str>>,
}

pub fn router(store: Arc<AnnotationStore>, options: ServiceOptions) -> Router {
    let origin = match options.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(v)) => AllowOrigin::exact(v),
        Some(Err(_)) => {
            tracing::warn!("cors origin is not a valid header value; allowing any origin");
            AllowOrigin::any()
        }
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION, header::HeaderName::from_static(TOKEN_HEADER)]);
    let state = AppState { store, token: options.token.map(Arc::from) };
    Router::new()
        .route("/health", get(|| async { Json(serde_json::json!({"status": "ok"})) }))
        .route("/sessions", post(post_session))
        .route("/sessions/{id}/next", get(get_next))
        .route("/sessions/{id}/judgments", post(post_judgment))
        .route("/sessions/{id}/stats", get(get_stats))
        .layer(cors)
        .with_state(state)
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = state.token.as_deref() else { return Ok(()) };
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let given = bearer.or_else(|| headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()));
    match given {
        Some(t) if constant_time_eq(t.as_bytes(), expected.as_bytes()) => Ok(()),
        Some(_) => Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "judge token does not match")),
        None => Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing judge token")),
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed", e.to_string()))
}

fn check_version(version: u32) -> Result<(), ApiError> {
    if version != PAYLOAD_VERSION {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "unsupported_version",
            format!("payload version {version} is not supported (expected {PAYLOAD_VERSION})"),
        ));
    }
    Ok(())
}

/// Runs a store call off the async executor; every write is fsynced.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, AnnotationError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn post_session(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    authorize(&state, &headers)?;
    let req: CreateSession = parse_body(&body)?;
    check_version(req.version)?;
    let session = create_session(&req.systems, &req.spec, Utc::now())?;
    let reply = SessionCreated {
        version: PAYLOAD_VERSION,
        session_id: session.session_id.clone(),
        total_items: session.items.len(),
        judges: session.judges.clone(),
    };
    let store = state.store.clone();
    blocking(move || store.insert(session)).await?;
    Ok((StatusCode::CREATED, Json(reply)).into_response())
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    judge: Option<String>,
}

async fn get_next(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<NextQuery>,
) -> Result<Json<NextItem>, ApiError> {
    authorize(&state, &headers)?;
    let judge = q.judge.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "malformed", "missing `judge` query parameter"))?;
    let store = state.store.clone();
    Ok(Json(blocking(move || store.next_item(&id, &judge)).await?))
}

async fn post_judgment(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Ack>, ApiError> {
    authorize(&state, &headers)?;
    let req: SubmitJudgment = parse_body(&body)?;
    check_version(req.version)?;
    let judgment = Judgment {
        item_id: req.item_id,
        judge_id: req.judge_id,
        verdict: req.verdict,
        timestamp: req.timestamp.unwrap_or_else(Utc::now),
    };
    let store = state.store.clone();
    Ok(Json(blocking(move || store.submit_judgment(&id, judgment)).await?))
}

async fn get_stats(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Json<SessionStats>, ApiError> {
    authorize(&state, &headers)?;
    let store = state.store.clone();
    Ok(Json(blocking(move || store.session_stats(&id)).await?.blinded()))
}

/// Serves `app` on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Binds `addr`, returning the listener and the address actually bound
/// (useful with port 0).
pub async fn bind(addr: &str) -> std::io::Result<(tokio::net::TcpListener, SocketAddr)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}
