//! HTTP task API over a single engine.
//!
//! Writes go through one mutex-guarded engine, so the event log has a total
//! order. Run status is published to an `RwLock<Arc<_>>` snapshot after
//! every write; readers clone the `Arc` and never wait on the engine.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::engine::{Engine, EngineError, Phase, RunStatus, TaskAnswer, TaskEnvelope, TaskKind};
use crate::eventlog::LogError;
use crate::model::KeyArgument;
use crate::pipeline::RunDir;
use crate::sampling::{AnnotationAction, SamplingError};

pub struct AppState {
    engine: Mutex<Engine>,
    snapshot: RwLock<Arc<RunStatus>>,
    run_dir: Option<RunDir>,
}

impl AppState {
    pub fn new(engine: Engine, run_dir: Option<RunDir>) -> Arc<Self> {
        let snapshot = RwLock::new(Arc::new(engine.status()));
        Arc::new(Self { engine: Mutex::new(engine), snapshot, run_dir })
    }

    pub fn status(&self) -> Arc<RunStatus> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Runs a write against the engine and publishes the new status.
    fn write<T>(&self, op: impl FnOnce(&mut Engine) -> Result<T, EngineError>) -> Result<T, ApiError> {
        let mut engine = self.engine.lock().map_err(|_| ApiError::Poisoned)?;
        let before = engine.phase();
        let out = op(&mut engine);
        let status = engine.status();
        if status.phase != before {
            if let Some(dir) = &self.run_dir {
                if let Err(e) = dir.write_artifacts(&engine) {
                    tracing::error!(error = %e, "writing artifacts failed");
                }
            }
        }
        *self.snapshot.write().expect("snapshot lock") = Arc::new(status);
        Ok(out?)
    }

    /// Consumes the state and returns the engine, if no handler holds it.
    pub fn into_engine(self: Arc<Self>) -> Option<Engine> {
        Arc::into_inner(self).and_then(|s| s.engine.into_inner().ok())
    }

    pub fn with_engine<T>(&self, f: impl FnOnce(&Engine) -> T) -> T {
        f(&self.engine.lock().expect("engine lock"))
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("engine lock poisoned")]
    Poisoned,
    #[error("worker failed: {0}")]
    Join(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        use EngineError as E;
        match self {
            ApiError::UnknownRun(_) => StatusCode::NOT_FOUND,
            ApiError::Engine(e) => match e {
                E::UnknownSession(_) | E::UnknownTask(_) | E::NoSession(_) => StatusCode::NOT_FOUND,
                E::WrongPhase { .. } | E::NotServed { .. } | E::AlreadyAnswered { .. } | E::Stale(_) => {
                    StatusCode::CONFLICT
                }
                E::SessionLimit(_) => StatusCode::CONFLICT,
                E::Sampling(SamplingError::NoPendingOpinion) => StatusCode::CONFLICT,
                E::Sampling(SamplingError::UnknownArgument(_) | SamplingError::EmptyArgument) => {
                    StatusCode::BAD_REQUEST
                }
                E::BadAnswer(_) | E::InvalidConfig(_) => StatusCode::BAD_REQUEST,
                E::Log(LogError::Halted(_)) => StatusCode::SERVICE_UNAVAILABLE,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ApiError::Poisoned | ApiError::Join(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        (status, Json(json!({ "error": self.to_string(), "status": status.as_u16() }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub annotator_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionAck {
    pub argument: Option<KeyArgument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NextTaskQuery {
    pub kind: TaskKind,
    pub annotator_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerBody {
    pub annotator_id: String,
    pub answer: TaskAnswer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerAck {
    pub accepted: bool,
    pub phase: Phase,
}

type AppResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    state: Arc<AppState>,
    op: impl FnOnce(&AppState) -> AppResult<T> + Send + 'static,
) -> AppResult<T> {
    tokio::task::spawn_blocking(move || op(&state)).await.map_err(|e| ApiError::Join(e.to_string()))?
}

fn task_response(task: Option<TaskEnvelope>) -> Response {
    match task {
        Some(t) => Json(t).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(body): Json<CreateSession>,
) -> AppResult<(StatusCode, Json<SessionCreated>)> {
    let session_id = blocking(state, move |s| s.write(|e| e.create_session(&body.annotator_id))).await?;
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id })))
}

async fn next_opinion(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Response> {
    let task = blocking(state, move |s| s.write(|e| e.next_opinion(&id))).await?;
    Ok(task_response(task))
}

async fn submit_action(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(action): Json<AnnotationAction>,
) -> AppResult<Json<ActionAck>> {
    let argument = blocking(state, move |s| s.write(|e| e.submit_action(&id, action))).await?;
    Ok(Json(ActionAck { argument }))
}

async fn next_task(State(state): State<Arc<AppState>>, Query(q): Query<NextTaskQuery>) -> AppResult<Response> {
    let task = blocking(state, move |s| s.write(|e| e.next_task(q.kind, &q.annotator_id))).await?;
    Ok(task_response(task))
}

async fn answer_task(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<AnswerBody>,
) -> AppResult<Json<AnswerAck>> {
    let phase = blocking(state, move |s| {
        s.write(|e| {
            e.answer_task(&id, &body.annotator_id, body.answer)?;
            Ok(e.phase())
        })
    })
    .await?;
    Ok(Json(AnswerAck { accepted: true, phase }))
}

async fn run_report(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<RunStatus>> {
    let status = state.status();
    if status.run_id != id {
        return Err(ApiError::UnknownRun(id));
    }
    Ok(Json((*status).clone()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_opinion))
        .route("/sessions/{id}/actions", post(submit_action))
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}/answer", post(answer_task))
        .route("/runs/{id}/report", get(run_report))
        .with_state(state)
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: port busy or unavailable ({source})")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server: {0}")]
    Server(std::io::Error),
}

pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(addr).await.map_err(|source| ServeError::Bind { addr, source })
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await.map_err(ServeError::Server)
}
