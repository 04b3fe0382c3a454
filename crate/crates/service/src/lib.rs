//! HTTP front end for the annotation queue.
//!
//! | route | method | body |
//! |---|---|---|
//! | `/batch` | GET | pending annotation requests (empty while training) |
//! | `/annotation` | POST | one annotation response |
//! | `/status` | GET | run id, iteration, phase, budget, counts |
//!
//! When a token is configured every route requires
//! `Authorization: Bearer <token>`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use sal_core::annotation::{AnnotationQueue, AnnotationRequest, AnnotationResponse, StatusReport, SubmitAck, SubmitError};

/// Environment variable holding the optional annotator bearer token.
pub const TOKEN_ENV: &str = "SAL_ANNOTATOR_TOKEN";

#[derive(Debug, Clone)]
pub struct AppState {
    pub queue: Arc<AnnotationQueue>,
    pub token: Option<String>,
}

impl AppState {
    pub fn new(queue: Arc<AnnotationQueue>, token: Option<String>) -> Self {
        AppState {
            queue,
            token: token.filter(|t| !t.is_empty()),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub reason: String,
}

fn error(status: StatusCode, code: &'static str, reason: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: code, reason: reason.into() })).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/batch", get(batch))
        .route("/annotation", post(annotation))
        .route("/status", get(status))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "missing or wrong bearer token");
        }
    }
    next.run(request).await
}

async fn batch(State(state): State<AppState>) -> Json<Vec<AnnotationRequest>> {
    Json(state.queue.pending())
}

async fn status(State(state): State<AppState>) -> Json<StatusReport> {
    Json(state.queue.status())
}

async fn annotation(
    State(state): State<AppState>,
    body: Result<Json<AnnotationResponse>, JsonRejection>,
) -> Result<Json<SubmitAck>, Response> {
    let Json(response) = body.map_err(|e| error(StatusCode::BAD_REQUEST, "MALFORMED", e.body_text()))?;
    state.queue.submit(response).map(Json).map_err(|e| {
        let reason = e.to_string();
        match e {
            SubmitError::Closed => error(StatusCode::CONFLICT, "CLOSED", reason),
            SubmitError::UnknownSample(_) => error(StatusCode::NOT_FOUND, "UNKNOWN_SAMPLE", reason),
            SubmitError::RunMismatch { .. } => error(StatusCode::CONFLICT, "RUN_MISMATCH", reason),
            SubmitError::Invalid(_) => error(StatusCode::UNPROCESSABLE_ENTITY, "INVALID", reason),
        }
    })
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
