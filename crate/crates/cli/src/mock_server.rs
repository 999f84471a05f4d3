//! The mock tool suite served over HTTP with the tool wire protocol.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};

use scenecraft::tools::{MockTools, ToolKind, ToolRequest, ToolResponse};

async fn call(State(mock): State<Arc<MockTools>>, Path(route): Path<String>, body: Bytes) -> impl IntoResponse {
    let Some(kind) = ToolKind::from_route(&format!("/v1/{route}")) else {
        return (StatusCode::NOT_FOUND, Json(ToolResponse::error("unknown_tool", format!("no tool at /v1/{route}"))));
    };
    let request: ToolRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(ToolResponse::error("bad_request", e.to_string()))),
    };
    if request.kind() != kind {
        return (
            StatusCode::BAD_REQUEST,
            Json(ToolResponse::error("kind_mismatch", format!("{} request sent to {}", request.kind().name(), kind.name()))),
        );
    }
    let response = tokio::task::spawn_blocking(move || mock.handle(&request))
        .await
        .unwrap_or_else(|e| ToolResponse::error("internal", e.to_string()));
    let status = StatusCode::from_u16(response.http_status()).unwrap_or(StatusCode::OK);
    (status, Json(response))
}

pub fn router(mock: MockTools) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { Json(serde_json::json!({ "status": "ok" })) }))
        .route("/v1/{route}", post(call))
        .with_state(Arc::new(mock))
}
