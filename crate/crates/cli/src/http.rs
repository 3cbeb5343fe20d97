//! Versioned JSON API over [`ChatService`].

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::Semaphore;

use crate::service::{ChatService, MessageRequest, ServiceError, UploadRequest};

#[derive(Clone)]
pub struct AppState {
    service: Arc<ChatService>,
    /// Bounds requests waiting for or holding the model.
    queue: Arc<Semaphore>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ServiceError>;

/// Runs blocking service work off the async workers, refusing it when the
/// queue is full.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&ChatService) -> Result<T, ServiceError> + Send + 'static,
{
    let permit = state.queue.clone().try_acquire_owned().map_err(|_| ServiceError::Busy)?;
    let svc = state.service.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        f(&svc)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn create_session(State(st): State<AppState>) -> Result<(StatusCode, Json<serde_json::Value>), ServiceError> {
    let s = st.service.create_session()?;
    Ok((StatusCode::CREATED, Json(serde_json::to_value(s).unwrap_or_default())))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    Ok(Json(serde_json::to_value(st.service.session(&id)?).unwrap_or_default()))
}

async fn post_message(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<MessageRequest>,
) -> ApiResult<serde_json::Value> {
    let reply = blocking(&st, move |svc| svc.post_message(&id, &req)).await?;
    Ok(Json(serde_json::to_value(reply).unwrap_or_default()))
}

async fn upload(State(st): State<AppState>, Json(req): Json<UploadRequest>) -> Result<(StatusCode, Json<serde_json::Value>), ServiceError> {
    let reply = blocking(&st, move |svc| svc.upload(&req)).await?;
    Ok((StatusCode::CREATED, Json(serde_json::to_value(reply).unwrap_or_default())))
}

async fn get_ecg(State(st): State<AppState>, Path(r): Path<String>) -> ApiResult<serde_json::Value> {
    Ok(Json(serde_json::to_value(st.service.ecg(&r)?).unwrap_or_default()))
}

async fn list_ecgs(State(st): State<AppState>) -> ApiResult<serde_json::Value> {
    let items: Vec<_> = st
        .service
        .list_ecgs()?
        .into_iter()
        .map(|(r, id)| json!({"ref": r, "record_id": id}))
        .collect();
    Ok(Json(json!({ "ecgs": items })))
}

pub fn router(service: Arc<ChatService>, queue: usize, max_body: usize) -> Router {
    let state = AppState {
        service,
        queue: Arc::new(Semaphore::new(queue.max(1))),
    };
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/session", post(create_session))
        .route("/v1/session/{id}", get(get_session))
        .route("/v1/session/{id}/message", post(post_message))
        .route("/v1/ecg", post(upload).get(list_ecgs))
        .route("/v1/ecg/{ref}", get(get_ecg))
        .layer(DefaultBodyLimit::max(max_body))
        .with_state(state)
}

/// Serves until the future `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
