//! HTTP/JSON binding of the gateway.
//!
//! Handlers are thin: they pull the bearer token, decode the body, call the
//! matching [`Gateway`] method on the blocking pool and map [`ApiError`] to a
//! status code plus `{"error": code, "message": text}`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::consult::{MessageKind, SessionMode};
use crate::error::ApiError;
use crate::gateway::{
    AlertQuery, Gateway, IngestBatch, RegisterRequest, ThresholdUpdate, VitalsQuery,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginRequest {
    pub id: String,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSessionRequest {
    pub target: String,
    pub mode: SessionMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostMessageRequest {
    pub kind: MessageKind,
    pub payload: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostMessageResponse {
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobResponse {
    #[serde(rename = "ref")]
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
struct EventsQuery {
    #[serde(default = "minus_one")]
    after: i64,
    wait_ms: Option<u64>,
}

fn minus_one() -> i64 {
    -1
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// How long a request is held before answering 503 during an outage.
    /// Probes with a shorter timeout see no response at all.
    pub outage_hang: Duration,
    /// Request body ceiling enforced before the gateway sees the body.
    pub body_limit: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            outage_hang: Duration::from_secs(5),
            body_limit: 16 * 1024 * 1024,
        }
    }
}

#[derive(Clone)]
struct AppState {
    gateway: Arc<Gateway>,
    config: HttpConfig,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            error: self.code().to_string(),
            message: self.detail(),
        };
        (status, Json(body)).into_response()
    }
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let token = value
        .strip_prefix("Bearer ")
        .or_else(|| value.strip_prefix("bearer "))?;
    Some(token.trim().to_string())
}

fn decode<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::Malformed(e.to_string()))
}

fn query<T>(q: Result<Query<T>, axum::extract::rejection::QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(v)| v)
        .map_err(|e| ApiError::Malformed(e.body_text()))
}

/// Runs a blocking gateway call off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Unavailable(format!("worker failed: {e}")))?
}

async fn json_call<T, F>(f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    match blocking(f).await {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn outage_gate(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if state.gateway.is_down() {
        tokio::time::sleep(state.config.outage_hang).await;
        return ApiError::Unavailable("gateway outage".into()).into_response();
    }
    next.run(req).await
}

async fn health(State(s): State<AppState>) -> Response {
    match s.gateway.health() {
        Some(ack) => Json(ack).into_response(),
        None => ApiError::Unavailable("gateway outage".into()).into_response(),
    }
}

async fn login(State(s): State<AppState>, body: Bytes) -> Response {
    json_call(move || {
        let req: LoginRequest = decode(&body)?;
        s.gateway.login(&req.id, &req.secret)
    })
    .await
}

async fn register(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let token = bearer(&headers);
    json_call(move || {
        let req: RegisterRequest = decode(&body)?;
        s.gateway.register(token.as_deref(), req)
    })
    .await
}

async fn ingest(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let token = bearer(&headers);
    json_call(move || {
        let batch: IngestBatch = decode(&body)?;
        s.gateway.ingest(token.as_deref(), &batch)
    })
    .await
}

async fn list_patients(State(s): State<AppState>, headers: HeaderMap) -> Response {
    let token = bearer(&headers);
    json_call(move || s.gateway.list_patients(token.as_deref())).await
}

async fn query_vitals(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    q: Result<Query<VitalsQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    let token = bearer(&headers);
    json_call(move || {
        let q = query(q)?;
        s.gateway.query_vitals(token.as_deref(), &id, &q)
    })
    .await
}

async fn get_thresholds(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let token = bearer(&headers);
    json_call(move || s.gateway.get_thresholds(token.as_deref(), &id)).await
}

async fn put_thresholds(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    let token = bearer(&headers);
    json_call(move || {
        let update: ThresholdUpdate = decode(&body)?;
        s.gateway.update_thresholds(token.as_deref(), &id, &update)
    })
    .await
}

async fn list_alerts(
    State(s): State<AppState>,
    headers: HeaderMap,
    q: Result<Query<AlertQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    let token = bearer(&headers);
    json_call(move || {
        let q = query(q)?;
        s.gateway.list_alerts(token.as_deref(), &q)
    })
    .await
}

async fn ack_alert(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let token = bearer(&headers);
    json_call(move || s.gateway.acknowledge(token.as_deref(), &id)).await
}

async fn open_session(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let token = bearer(&headers);
    json_call(move || {
        let req: OpenSessionRequest = decode(&body)?;
        s.gateway
            .open_session(token.as_deref(), &req.target, req.mode)
    })
    .await
}

async fn list_sessions(State(s): State<AppState>, headers: HeaderMap) -> Response {
    let token = bearer(&headers);
    json_call(move || s.gateway.list_sessions(token.as_deref())).await
}

async fn accept_session(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let token = bearer(&headers);
    json_call(move || s.gateway.accept_session(token.as_deref(), &id)).await
}

async fn post_message(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Response {
    let token = bearer(&headers);
    json_call(move || {
        let req: PostMessageRequest = decode(&body)?;
        let seq = s
            .gateway
            .post_message(token.as_deref(), &id, req.kind, req.payload)?;
        Ok(PostMessageResponse { seq })
    })
    .await
}

async fn fetch_events(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    q: Result<Query<EventsQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    let token = bearer(&headers);
    json_call(move || {
        let q = query(q)?;
        let wait = q.wait_ms.map(Duration::from_millis);
        s.gateway.fetch_events(token.as_deref(), &id, q.after, wait)
    })
    .await
}

async fn terminate_session(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let token = bearer(&headers);
    json_call(move || s.gateway.terminate_session(token.as_deref(), &id)).await
}

async fn put_blob(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let token = bearer(&headers);
    json_call(move || {
        let reference = s.gateway.put_blob(token.as_deref(), &body)?;
        Ok(BlobResponse { reference })
    })
    .await
}

async fn get_blob(
    State(s): State<AppState>,
    headers: HeaderMap,
    Path(hash): Path<String>,
) -> Response {
    let token = bearer(&headers);
    match blocking(move || s.gateway.get_blob(token.as_deref(), &hash)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn reliability_metrics(State(s): State<AppState>, headers: HeaderMap) -> Response {
    let token = bearer(&headers);
    json_call(move || s.gateway.reliability_metrics(token.as_deref())).await
}

async fn not_found() -> Response {
    ApiError::NotFound("no such route".into()).into_response()
}

pub fn router(gateway: Arc<Gateway>, config: HttpConfig) -> Router {
    let limit = config.body_limit;
    let state = AppState { gateway, config };
    Router::new()
        .route("/api/health", get(health))
        .route("/api/login", post(login))
        .route("/api/register", post(register))
        .route("/api/vitals", post(ingest))
        .route("/api/patients", get(list_patients))
        .route("/api/patients/{id}/vitals", get(query_vitals))
        .route(
            "/api/patients/{id}/thresholds",
            get(get_thresholds).put(put_thresholds),
        )
        .route("/api/alerts", get(list_alerts))
        .route("/api/alerts/{id}/ack", post(ack_alert))
        .route("/api/sessions", post(open_session).get(list_sessions))
        .route("/api/sessions/{id}/accept", post(accept_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .route("/api/sessions/{id}/events", get(fetch_events))
        .route("/api/sessions/{id}/terminate", post(terminate_session))
        .route("/api/blobs", post(put_blob))
        .route("/api/blobs/{hash}", get(get_blob))
        .route("/api/metrics/reliability", get(reliability_metrics))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn_with_state(state.clone(), outage_gate))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    gateway: Arc<Gateway>,
    listener: tokio::net::TcpListener,
    config: HttpConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(gateway, config))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server running on its own runtime thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.stop_inner()
    }

    fn stop_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves on a background thread.
pub fn spawn_server(
    gateway: Arc<Gateway>,
    addr: SocketAddr,
    config: HttpConfig,
) -> std::io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let bound = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name(format!("http-{bound}"))
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(gateway, listener, config, async move {
                    let _ = rx.await;
                })
                .await
            })
        })?;
    Ok(ServerHandle {
        addr: bound,
        stop: Some(tx),
        thread: Some(thread),
    })
}
