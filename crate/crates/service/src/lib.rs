//! HTTP front end for the review store.
//!
//! | method | path | body / query |
//! |---|---|---|
//! | GET | `/healthz` | |
//! | GET | `/batches` | |
//! | POST | `/batches` | [`CreateBatch`] |
//! | GET | `/tasks` | `?batch=` |
//! | POST | `/verdicts` | [`VerdictSubmission`] |
//! | GET | `/verdicts` | `?batch=&reviewer=` |
//! | GET | `/report` | `?batch=` |
//! | POST | `/crossexam` | list of MCQ records |
//! | GET | `/crossexam/pending` | |
//! | POST | `/crossexam/{id}/resolve` | [`ResolveRequest`] |
//!
//! Errors are `{"error": kind, "message": text}` with a matching status.

use std::future::Future;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use qcompare_core::evalkit::McqRecord;
use qcompare_core::review::{
    create_review_batch, CorrectnessReport, CrossExamTask, ResolveRequest, ReviewError, ReviewPayload, ReviewStore,
    ReviewTask, ReviewVerdict, SubmitOutcome, VerdictSubmission,
};

pub use qcompare_core::review;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateBatch {
    pub batch: String,
    pub kept: Vec<ReviewPayload>,
    pub removed: Vec<ReviewPayload>,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Created {
    pub created: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictAck {
    pub outcome: SubmitOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Deserialize)]
struct BatchQuery {
    batch: String,
    reviewer: Option<String>,
}

pub struct ApiError(ReviewError);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            ReviewError::NotFound { .. } => (StatusCode::NOT_FOUND, "not_found"),
            ReviewError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ReviewError::Insufficient { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "insufficient"),
            ReviewError::NoVerdicts(_) => (StatusCode::UNPROCESSABLE_ENTITY, "no_verdicts"),
            ReviewError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid"),
            ReviewError::Io { .. } | ReviewError::Malformed { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "review store failure");
        }
        let body = ErrorBody {
            error: kind.to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<RwLock<ReviewStore>>;
type ApiResult<T> = Result<Json<T>, ApiError>;

/// Reads share the lock; every write goes through the single write guard,
/// which serializes appends to the log.
pub fn router(store: ReviewStore) -> Router {
    let state: Shared = Arc::new(RwLock::new(store));
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/batches", get(list_batches).post(create_batch))
        .route("/tasks", get(list_tasks))
        .route("/verdicts", get(list_verdicts).post(submit_verdict))
        .route("/report", get(report))
        .route("/crossexam", post(create_crossexam))
        .route("/crossexam/pending", get(pending))
        .route("/crossexam/{id}/resolve", post(resolve))
        .with_state(state)
}

async fn list_batches(State(s): State<Shared>) -> Json<Vec<String>> {
    Json(s.read().batches())
}

async fn create_batch(State(s): State<Shared>, Json(req): Json<CreateBatch>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let tasks = create_review_batch(&req.batch, &req.kept, &req.removed, req.k, req.seed)?;
    let created = s.write().add_batch(&req.batch, tasks)?;
    Ok((StatusCode::CREATED, Json(Created { created })))
}

async fn list_tasks(State(s): State<Shared>, Query(q): Query<BatchQuery>) -> ApiResult<Vec<ReviewTask>> {
    Ok(Json(s.read().tasks(&q.batch)?))
}

async fn submit_verdict(State(s): State<Shared>, Json(v): Json<VerdictSubmission>) -> ApiResult<VerdictAck> {
    let outcome = s.write().submit_verdict(v)?;
    Ok(Json(VerdictAck { outcome }))
}

async fn list_verdicts(State(s): State<Shared>, Query(q): Query<BatchQuery>) -> ApiResult<Vec<ReviewVerdict>> {
    Ok(Json(s.read().verdicts(&q.batch, q.reviewer.as_deref())?))
}

async fn report(State(s): State<Shared>, Query(q): Query<BatchQuery>) -> ApiResult<CorrectnessReport> {
    Ok(Json(s.read().correctness_report(&q.batch)?))
}

async fn create_crossexam(
    State(s): State<Shared>,
    Json(records): Json<Vec<McqRecord>>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let tasks = records
        .into_iter()
        .map(CrossExamTask::from_record)
        .collect::<Result<Vec<_>, _>>()?;
    let created = s.write().add_crossexam(tasks)?;
    Ok((StatusCode::CREATED, Json(Created { created })))
}

async fn pending(State(s): State<Shared>) -> Json<Vec<CrossExamTask>> {
    Json(s.read().list_pending())
}

async fn resolve(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ResolveRequest>,
) -> ApiResult<CrossExamTask> {
    Ok(Json(s.write().resolve(&id, req)?))
}

/// Opens the store under `dir` and serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    dir: &Path,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), std::io::Error> {
    let store = ReviewStore::open(dir).map_err(std::io::Error::other)?;
    tracing::info!(addr = %listener.local_addr()?, log = %store.path().display(), "review service listening");
    axum::serve(listener, router(store)).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C.
pub async fn ctrl_c() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        tracing::warn!(error = %e, "cannot listen for ctrl-c");
        std::future::pending::<()>().await;
    }
}
