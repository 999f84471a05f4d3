//! REST interface over the engine.

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use scenecraft::engine::{Engine, Feedback, SessionFilter, SessionOptions};
use scenecraft::policy::Phase;
use scenecraft::Error;

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_for(e: &Error) -> (StatusCode, &'static str) {
    match e {
        Error::SessionNotFound(_) | Error::ArtifactNotFound { .. } => (StatusCode::NOT_FOUND, "not_found"),
        Error::IllegalTransition { .. } => (StatusCode::CONFLICT, "illegal_transition"),
        Error::InvalidFeedback(_) | Error::InvalidDiffIndex { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_feedback"),
        Error::InvalidInput(_) | Error::UnparseablePrompt(_) | Error::InvalidRequest(_) => {
            (StatusCode::BAD_REQUEST, "invalid_input")
        }
        Error::LayoutInfeasible(_) => (StatusCode::UNPROCESSABLE_ENTITY, "layout_infeasible"),
        Error::ToolUnavailable { .. } => (StatusCode::BAD_GATEWAY, "tool_unavailable"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = status_for(&self.0);
        (status, Json(ErrorBody { error: code.into(), message: self.0.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub prompt: String,
    #[serde(default)]
    pub options: SessionOptions,
}

#[derive(Debug, Default, Deserialize)]
pub struct AdvanceQuery {
    /// Run a single transition instead of running to the next stop.
    #[serde(default)]
    pub one: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    pub phase: Option<String>,
    #[serde(default)]
    pub awaiting_feedback: bool,
}

/// Runs blocking engine work off the async workers.
async fn blocking<T, F>(engine: &Arc<Engine>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> scenecraft::Result<T> + Send + 'static,
{
    let engine = engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError(Error::StorageFailure(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create(State(engine): State<Arc<Engine>>, Json(body): Json<CreateSession>) -> ApiResult<impl IntoResponse> {
    let s = blocking(&engine, move |e| e.create_session(&body.prompt, &body.options)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn list(State(engine): State<Arc<Engine>>, Query(q): Query<ListQuery>) -> ApiResult<impl IntoResponse> {
    let phase = match q.phase.as_deref() {
        Some(p) => Some(Phase::from_name(p).ok_or_else(|| ApiError(Error::InvalidInput(format!("unknown phase {p:?}"))))?),
        None => None,
    };
    let filter = SessionFilter { phase, awaiting_feedback: q.awaiting_feedback };
    Ok(Json(blocking(&engine, move |e| e.list_sessions(&filter)).await?))
}

async fn show(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&engine, move |e| e.get_session(&id)).await?))
}

async fn advance(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    Query(q): Query<AdvanceQuery>,
) -> ApiResult<impl IntoResponse> {
    let s = blocking(&engine, move |e| if q.one { e.advance_one(&id) } else { e.advance(&id) }).await?;
    Ok(Json(s))
}

async fn feedback(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    Json(body): Json<Feedback>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&engine, move |e| e.submit_feedback(&id, body)).await?))
}

async fn artifact(State(engine): State<Arc<Engine>>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let content_type = if name.ends_with(".png") { "image/png" } else { "application/octet-stream" };
    let bytes = blocking(&engine, move |e| e.artifact_bytes(&id, &name)).await?;
    Ok(([(header::CONTENT_TYPE, content_type)], Body::from(bytes)).into_response())
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create).get(list))
        .route("/v1/sessions/{id}", get(show))
        .route("/v1/sessions/{id}/advance", post(advance))
        .route("/v1/sessions/{id}/feedback", post(feedback))
        .route("/v1/sessions/{id}/artifacts/{name}", get(artifact))
        .with_state(engine)
}
