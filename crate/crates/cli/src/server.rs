//! HTTP front of the reader study.

use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tumorsynth::turing::{TuringStudy, Verdict};
use tumorsynth::Error;

pub type SharedStudy = Arc<Mutex<TuringStudy>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub reader_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitJudgment {
    pub case_id: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
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

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::Invalid(_) | Error::Contract(_) => (StatusCode::BAD_REQUEST, "invalid"),
            Error::NotReady(_) | Error::InsufficientPool(_) => (StatusCode::CONFLICT, "not_ready"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = ErrorBody {
            error: kind.into(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn lock(s: &SharedStudy) -> std::sync::MutexGuard<'_, TuringStudy> {
    s.lock().unwrap_or_else(|p| p.into_inner())
}

async fn create_session(State(s): State<SharedStudy>, Json(req): Json<CreateSession>) -> Result<Response, ApiError> {
    if req.reader_id.trim().is_empty() {
        return Err(Error::Invalid("reader_id is empty".into()).into());
    }
    let info = lock(&s).create_session(&req.reader_id, req.seed)?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn session_info(State(s): State<SharedStudy>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    Ok(Json(lock(&s).info(&id)?))
}

async fn next_case(State(s): State<SharedStudy>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    Ok(Json(lock(&s).next_case(&id)?))
}

async fn submit(
    State(s): State<SharedStudy>,
    Path(id): Path<String>,
    Json(req): Json<SubmitJudgment>,
) -> ApiResult<impl Serialize> {
    Ok(Json(lock(&s).submit_judgment(&id, &req.case_id, req.verdict)?))
}

async fn errors(State(s): State<SharedStudy>) -> ApiResult<impl Serialize> {
    Ok(Json(lock(&s).error_report()))
}

async fn slice(State(s): State<SharedStudy>, Path((id, k)): Path<(String, usize)>) -> ApiResult<impl Serialize> {
    Ok(Json(lock(&s).slice(&id, k)?))
}

async fn mask(State(s): State<SharedStudy>, Path((id, k)): Path<(String, usize)>) -> ApiResult<impl Serialize> {
    Ok(Json(lock(&s).mask_slice(&id, k)?))
}

pub fn router(study: TuringStudy) -> Router {
    router_shared(Arc::new(Mutex::new(study)))
}

pub fn router_shared(study: SharedStudy) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/next", get(next_case))
        .route("/sessions/{id}/judgments", post(submit))
        .route("/reports/errors", get(errors))
        .route("/cases/{id}/slices/{k}", get(slice))
        .route("/cases/{id}/mask/{k}", get(mask))
        .with_state(study)
}

pub async fn serve(study: TuringStudy, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("reader study listening on {}", listener.local_addr()?);
    axum::serve(listener, router(study)).await
}
