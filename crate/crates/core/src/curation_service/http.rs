//! JSON-over-HTTP API for the review UI.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::{FeedbackDelta, HumanVerdict, PseudoLabel, ReviewQueue};
use crate::error::Error;
use crate::knowledge_graph::ConceptGraph;
use crate::record_store::RecordStore;

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

/// Everything the service mutates, behind one lock.
pub struct Service {
    pub queue: ReviewQueue,
    pub store: Option<RecordStore>,
    pub graph: Option<ConceptGraph>,
    /// Where the graph is saved after feedback.
    pub graph_path: Option<PathBuf>,
    /// JSON list of curated record ids, kept in sync with feedback.
    pub curated_path: Option<PathBuf>,
}

impl Service {
    pub fn new(queue: ReviewQueue) -> Self {
        Service {
            queue,
            store: None,
            graph: None,
            graph_path: None,
            curated_path: None,
        }
    }

    pub fn apply_feedback(&mut self) -> crate::Result<FeedbackDelta> {
        let graph = self
            .graph
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("no concept graph loaded".into()))?;
        let delta = self.queue.apply_feedback(graph)?;
        if let Some(p) = &self.graph_path {
            graph.save(p)?;
        }
        if let Some(p) = &self.curated_path {
            update_curated(p, &delta)?;
        }
        Ok(delta)
    }
}

/// Adds `delta.additions` to and drops `delta.removals` from the id list at `path`.
pub fn update_curated(path: &std::path::Path, delta: &FeedbackDelta) -> crate::Result<BTreeSet<String>> {
    let mut ids: BTreeSet<String> = match std::fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeSet::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    ids.extend(delta.additions.iter().cloned());
    for r in &delta.removals {
        ids.remove(r);
    }
    let text = serde_json::to_string_pretty(&ids)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(ids)
}

#[derive(Clone)]
pub struct AppState {
    service: Arc<Mutex<Service>>,
    clock: Clock,
}

impl AppState {
    pub fn new(service: Service, clock: Clock) -> Self {
        AppState {
            service: Arc::new(Mutex::new(service)),
            clock,
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Service> {
        self.service.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct ApiError(StatusCode, ErrorBody);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::LeaseViolation(_) | Error::BadTransition { .. } => StatusCode::CONFLICT,
            Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(
            status,
            ErrorBody {
                code: e.code().to_string(),
                message: e.to_string(),
            },
        )
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(
            StatusCode::BAD_REQUEST,
            ErrorBody {
                code: "bad_request".into(),
                message: e.body_text(),
            },
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Deserialize)]
struct HolderQuery {
    holder: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VerdictBody {
    pub holder: String,
    pub verdict: HumanVerdict,
    #[serde(default)]
    pub correction: Option<PseudoLabel>,
}

async fn next_task(State(app): State<AppState>, Query(q): Query<HolderQuery>) -> ApiResult<Response> {
    let holder = q
        .holder
        .filter(|h| !h.is_empty())
        .ok_or_else(|| Error::InvalidArgument("holder is required".into()))?;
    let now = (app.clock)();
    match app.lock().queue.lease_next(&holder, now)? {
        Some(task) => Ok(Json(task).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn submit_verdict(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: std::result::Result<Json<VerdictBody>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(body) = body?;
    let now = (app.clock)();
    let task = app
        .lock()
        .queue
        .submit_human_verdict(&id, &body.holder, body.verdict, body.correction, now)?;
    Ok(Json(task).into_response())
}

async fn get_task(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let task = app.lock().queue.get(&id)?.clone();
    Ok(Json(task).into_response())
}

async fn stats(State(app): State<AppState>) -> Response {
    Json(app.lock().queue.stats()).into_response()
}

async fn media(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = {
        let svc = app.lock();
        let store = svc
            .store
            .as_ref()
            .ok_or_else(|| Error::NotFound(format!("media for {id}")))?;
        let record = store.get_record(&id)?;
        store.read_media(&record.id)?
    };
    let mime = image::guess_format(&bytes)
        .map(|f| f.to_mime_type())
        .unwrap_or("application/octet-stream");
    Ok(([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response())
}

async fn apply_feedback(State(app): State<AppState>) -> ApiResult<Response> {
    let delta = app.lock().apply_feedback()?;
    Ok(Json(delta).into_response())
}

async fn fallback() -> ApiError {
    ApiError(
        StatusCode::NOT_FOUND,
        ErrorBody {
            code: "not_found".into(),
            message: "no such endpoint".into(),
        },
    )
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/tasks/{id}/verdict", post(submit_verdict))
        .route("/api/stats", get(stats))
        .route("/api/media/{id}", get(media))
        .route("/api/feedback/apply", post(apply_feedback))
        .fallback(fallback)
        .with_state(app)
}
