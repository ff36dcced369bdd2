//! HTTP/JSON management API and EDI push routes.
//!
//! | route                              | success | errors                  |
//! |------------------------------------|---------|-------------------------|
//! | GET  /api/health                   | 200     |                         |
//! | GET  /api/incidents                | 200     |                         |
//! | POST /api/incidents                | 201     | 400 unknown kind/config |
//! | GET  /api/incidents/{id}           | 200     | 404                     |
//! | POST /api/incidents/{id}/cancel    | 202     | 404, 409 terminal       |
//! | GET  /api/workflows                | 200     |                         |
//! | GET  /api/workflows/{kind}/stats   | 200     | 404                     |
//! | POST /edi/{path}                   | 202     | 404, 409, 413           |

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tracing::{error, info};

use crate::edi::{EdiError, Headers};
use crate::ids::IncidentId;
use crate::statestore::StoreError;
use crate::wfcore::WorkflowError;

use super::engine::Engine;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        error!("internal error: {e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownIncident(id) => Self::not_found(format!("incident {id}")),
            other => Self::internal(other),
        }
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        match e {
            WorkflowError::UnknownKind(_) | WorkflowError::InitHook { .. } => {
                Self::new(StatusCode::BAD_REQUEST, format!("{e:#}"))
            }
            WorkflowError::Broker(crate::broker::BrokerError::PayloadTooLarge { .. }) => {
                Self::new(StatusCode::BAD_REQUEST, e.to_string())
            }
            WorkflowError::NotActive { .. } => Self::new(StatusCode::CONFLICT, e.to_string()),
            WorkflowError::Store(s) => s.into(),
            other => Self::internal(other),
        }
    }
}

impl From<EdiError> for ApiError {
    fn from(e: EdiError) -> Self {
        let status = match &e {
            EdiError::NotFound(_) | EdiError::UnknownIncident(_) => StatusCode::NOT_FOUND,
            EdiError::IncidentNotActive { .. } => StatusCode::CONFLICT,
            EdiError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            _ => return Self::internal(e),
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_id(raw: &str) -> ApiResult<IncidentId> {
    raw.parse().map_err(|_| ApiError::not_found(format!("incident {raw}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn health(State(engine): State<Arc<Engine>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "workers": engine.pool().worker_count(),
        "recovered": engine.recovered(),
        "pending_messages": engine.broker().total_pending(),
    }))
}

async fn list_incidents(State(engine): State<Arc<Engine>>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(engine.incidents()?)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateIncident {
    workflow_kind: String,
    #[serde(default)]
    label: String,
    #[serde(default)]
    initial_payload: Option<Value>,
}

async fn create_incident(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateIncident = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))?;
    let id = blocking(move || {
        let payload = req.initial_payload.unwrap_or_else(|| json!({}));
        Ok(engine.create_incident(&req.workflow_kind, &req.label, payload)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "incident_id": id, "status": "ACTIVE" }))).into_response())
}

async fn incident_detail(State(engine): State<Arc<Engine>>, Path(raw): Path<String>) -> ApiResult<Json<Value>> {
    let id = parse_id(&raw)?;
    Ok(Json(json!(engine.incident_detail(id)?)))
}

async fn cancel_incident(State(engine): State<Arc<Engine>>, Path(raw): Path<String>) -> ApiResult<Response> {
    let id = parse_id(&raw)?;
    blocking(move || Ok(engine.cancel_incident(id)?)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "incident_id": id, "status": "CANCELLED" }))).into_response())
}

async fn workflows(State(engine): State<Arc<Engine>>) -> Json<Value> {
    Json(json!(engine.runtime().workflows()))
}

async fn workflow_stats(State(engine): State<Arc<Engine>>, Path(kind): Path<String>) -> ApiResult<Json<Value>> {
    if !engine.runtime().has_workflow(&kind) {
        return Err(ApiError::not_found(format!("workflow kind {kind:?}")));
    }
    Ok(Json(json!({ "workflow_kind": kind, "stages": engine.workflow_statistics(&kind)? })))
}

/// Request headers worth keeping with pushed data.
fn push_metadata(headers: &HeaderMap) -> Headers {
    headers
        .iter()
        .filter(|(k, _)| k.as_str() == "content-type" || k.as_str().starts_with("x-"))
        .filter_map(|(k, v)| Some((k.as_str().to_owned(), v.to_str().ok()?.to_owned())))
        .collect()
}

async fn edi_push(
    State(engine): State<Arc<Engine>>,
    Path(rest): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let path = format!("/{}", rest.trim_start_matches('/'));
    let metadata = push_metadata(&headers);
    let message_id = blocking(move || Ok(engine.edi().handle_push(&path, &body, &metadata)?)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "message_id": message_id }))).into_response())
}

pub fn router(engine: Arc<Engine>) -> Router {
    // One byte over the cap still reaches the handler so it can answer 413 itself.
    let body_limit = engine.config().edi.max_push_bytes.saturating_add(1);
    Router::new()
        .route("/api/health", get(health))
        .route("/api/incidents", get(list_incidents).post(create_incident))
        .route("/api/incidents/{id}", get(incident_detail))
        .route("/api/incidents/{id}/cancel", post(cancel_incident))
        .route("/api/workflows", get(workflows))
        .route("/api/workflows/{kind}/stats", get(workflow_stats))
        .route("/edi/{*path}", post(edi_push).layer(DefaultBodyLimit::max(body_limit)))
        .with_state(engine)
}

/// An API server on its own thread and tokio runtime.
pub struct HttpServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl HttpServer {
    /// Bind synchronously, so a busy port fails here, then serve in the
    /// background. With `handle_ctrl_c` the server also stops on SIGINT.
    pub fn start(engine: Arc<Engine>, addr: SocketAddr, handle_ctrl_c: bool) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("surgeflow-http")
            .enable_all()
            .build()?;
        let thread = std::thread::Builder::new().name("http".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                info!("API listening on http://{addr}");
                let stop = async move {
                    if handle_ctrl_c {
                        tokio::select! {
                            _ = rx => {}
                            _ = tokio::signal::ctrl_c() => info!("interrupt received, shutting down"),
                        }
                    } else {
                        let _ = rx.await;
                    }
                };
                axum::serve(listener, router(engine)).with_graceful_shutdown(stop).await
            })
        })?;
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server exits on its own (ctrl-c).
    pub fn wait(mut self) -> std::io::Result<()> {
        self.join()
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.join()
    }

    fn join(&mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("http thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.join();
    }
}
