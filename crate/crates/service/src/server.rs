//! HTTP front end over a [`Study`].

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower::ServiceExt;
use tower_http::services::{ServeDir, ServeFile};

use crate::layout;
use crate::study::{Study, StudyError, Submission, TaskKind};

#[derive(Clone)]
struct AppState {
    study: Arc<Study>,
    audio_items: Arc<BTreeSet<String>>,
}

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

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        let (status, code) = match &e {
            StudyError::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            StudyError::UnknownStudy(_) => (StatusCode::NOT_FOUND, "unknown_study"),
            StudyError::Expired(_) => (StatusCode::GONE, "expired"),
            StudyError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            StudyError::InvalidRater(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation"),
            StudyError::NotConfigured(_) => (StatusCode::CONFLICT, "not_configured"),
            StudyError::CorruptLog { .. } | StudyError::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

#[derive(Deserialize)]
struct TaskQuery {
    rater: String,
    kind: TaskKind,
}

async fn get_task(State(app): State<AppState>, query: Result<Query<TaskQuery>, QueryRejection>) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.body_text()))?;
    let reply = app.study.next_task(&q.rater, q.kind)?;
    Ok(Json(reply).into_response())
}

async fn post_annotation(State(app): State<AppState>, body: Result<Json<Submission>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(submission) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.body_text()))?;
    let study = app.study.clone();
    let ack = tokio::task::spawn_blocking(move || study.submit(&submission))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(ack).into_response())
}

async fn get_audio(State(app): State<AppState>, Path(item): Path<String>, request: Request) -> Result<Response, ApiError> {
    if !app.audio_items.contains(&item) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_item", format!("no audio for item {item:?}")));
    }
    let path = app.study.dir().join(layout::audio_file(&item));
    let response = ServeFile::new(path).oneshot(request).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(response.map(axum::body::Body::new))
}

async fn get_status(State(app): State<AppState>) -> Response {
    Json(app.study.status()).into_response()
}

/// Routes under `/api`, plus static files from `ui_dir` for everything else.
pub fn router(study: Arc<Study>, ui_dir: Option<PathBuf>) -> Router {
    let audio_items = Arc::new(study.known_items().into_iter().filter(|id| crate::study::is_safe_id(id)).collect());
    let api = Router::new()
        .route("/api/task", get(get_task))
        .route("/api/annotation", post(post_annotation))
        .route("/api/audio/{item}", get(get_audio))
        .route("/api/study/status", get(get_status))
        .with_state(AppState { study, audio_items });
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C.
pub async fn serve(study: Arc<Study>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(study, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
