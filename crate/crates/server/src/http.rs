//! JSON HTTP API over the answering engine and the session registry.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

use medbrain_core::orchestrator::{Evidence, PipelineError, Turn};
use medbrain_core::{Answer, Brain};

use crate::sessions::{SessionError, SessionRegistry};

/// Attached to every answer payload under the `disclaimer` key.
pub const DISCLAIMER: &str = "for academic research only";

#[derive(Clone)]
pub struct AppState {
    pub brain: Arc<Brain>,
    pub sessions: Arc<SessionRegistry>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AskRequest {
    pub question: String,
    #[serde(default = "yes")]
    pub use_brain: bool,
}

fn yes() -> bool {
    true
}

/// Wire form of an answer. Carries the engine's answer unchanged plus the
/// disclaimer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPayload {
    pub answer: String,
    pub keywords: Vec<String>,
    pub evidence: Vec<Evidence>,
    pub used_brain: bool,
    pub disclaimer: String,
}

impl From<Answer> for AnswerPayload {
    fn from(a: Answer) -> Self {
        Self {
            answer: a.text,
            keywords: a.keywords,
            evidence: a.evidence,
            used_brain: a.used_brain,
            disclaimer: DISCLAIMER.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPayload {
    pub question: String,
    pub answer: AnswerPayload,
    pub timestamp: DateTime<Utc>,
}

impl From<Turn> for TurnPayload {
    fn from(t: Turn) -> Self {
        Self {
            question: t.question,
            answer: t.answer.into(),
            timestamp: t.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptPayload {
    pub session_id: String,
    pub turns: Vec<TurnPayload>,
}

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
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            PipelineError::SessionNotFound(_) => StatusCode::NOT_FOUND,
            PipelineError::Gateway { .. } | PipelineError::Source(_) => StatusCode::BAD_GATEWAY,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, e.to_string()),
            SessionError::Pipeline(p) => p.into(),
            SessionError::Corrupt { .. } | SessionError::Io { .. } => {
                tracing::error!(error = %e, "session storage failure");
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "session storage failure")
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/ask", post(ask))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn ask(
    State(state): State<AppState>,
    body: Result<Json<AskRequest>, JsonRejection>,
) -> Result<Json<AnswerPayload>, ApiError> {
    let Json(req) = body?;
    let answer = state.brain.ask(&req.question, req.use_brain).await?;
    Ok(Json(answer.into()))
}

async fn create_session(State(state): State<AppState>) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let id = state.sessions.create().await?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "session_id": id }))))
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<TranscriptPayload>, ApiError> {
    let session = state
        .sessions
        .get(&id)
        .await
        .ok_or(SessionError::NotFound(id))?;
    Ok(Json(TranscriptPayload {
        session_id: session.session_id,
        turns: session.turns.into_iter().map(Into::into).collect(),
    }))
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<AskRequest>, JsonRejection>,
) -> Result<Json<AnswerPayload>, ApiError> {
    let Json(req) = body?;
    let turn = state
        .sessions
        .post(&id, &state.brain, &req.question, req.use_brain)
        .await?;
    Ok(Json(turn.answer.into()))
}

/// Serves on an already bound listener until `shutdown` resolves. Session
/// turns are synced to disk before each response, so nothing is pending at
/// shutdown.
pub async fn serve_on(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}
