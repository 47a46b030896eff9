//! HTTP annotation service.
//!
//! Hands out open tasks under time-limited leases, ingests picks and
//! second-round answers, and reports balance statistics. Every mutation is
//! applied to a copy of the store, written to disk, and only then published,
//! so a 200 response means the change survives a restart.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use vqa_balance_core::data::{AnnotationResult, ComplementaryPair, DataStore, Outcome, TaskStatus};
use vqa_balance_core::pipeline::{add_round_answer, balance_report, balanced_snapshot, ingest_result, BalanceReport};
use vqa_balance_core::Error as CoreError;

use crate::store::{load_store, save_store, StoreError};

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";
pub const DEFAULT_LEASE_TTL: Duration = Duration::from_secs(600);
const ANONYMOUS: &str = "anonymous";

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Lease {
    annotator: String,
    expires: u64,
}

struct Inner {
    store: DataStore,
    leases: HashMap<String, Lease>,
}

pub struct AppState {
    inner: RwLock<Inner>,
    dir: Option<PathBuf>,
    lease_ttl: Duration,
    clock: Clock,
}

impl AppState {
    /// Serves the store under `dir`, persisting every change back to it.
    pub fn open(dir: PathBuf, lease_ttl: Duration) -> Result<Self, StoreError> {
        let store = load_store(&dir)?;
        Ok(Self::build(store, Some(dir), lease_ttl, system_clock()))
    }

    /// A service with no backing directory, mostly for tests.
    pub fn in_memory(store: DataStore, lease_ttl: Duration) -> Self {
        Self::build(store, None, lease_ttl, system_clock())
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    fn build(store: DataStore, dir: Option<PathBuf>, lease_ttl: Duration, clock: Clock) -> Self {
        AppState {
            inner: RwLock::new(Inner {
                store,
                leases: HashMap::new(),
            }),
            dir,
            lease_ttl,
            clock,
        }
    }

    pub fn snapshot(&self) -> DataStore {
        self.inner.read().expect("lock poisoned").store.clone()
    }

    fn persist(&self, store: &DataStore) -> Result<(), ApiError> {
        match &self.dir {
            Some(dir) => save_store(store, dir).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateView {
    pub image_id: String,
    pub display_uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub question: String,
    pub shown_answer: String,
    pub candidates: Vec<CandidateView>,
    pub allows_not_possible: bool,
    /// Unix seconds when the caller's lease runs out.
    pub lease_expires: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultBody {
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultResponse {
    pub task_id: String,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerBody {
    pub task_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub task_id: String,
    pub answers_collected: usize,
    pub pair: Option<ComplementaryPair>,
}

/// A picked task still waiting for second-round answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundView {
    pub task_id: String,
    pub question: String,
    pub image_id: String,
    pub display_uri: Option<String>,
    pub answers_collected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::Unknown { .. } => StatusCode::NOT_FOUND,
            CoreError::TaskState { .. } | CoreError::RoundComplete(_) | CoreError::Duplicate(_) => StatusCode::CONFLICT,
            CoreError::NotACandidate { .. } | CoreError::Invalid { .. } | CoreError::AnswerCount { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(e.status(), e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/result", post(submit_result))
        .route("/api/rounds/next", get(next_round))
        .route("/api/answers", post(submit_answer))
        .route("/api/stats", get(stats))
        .with_state(state)
}

fn annotator(headers: &HeaderMap) -> String {
    headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .unwrap_or(ANONYMOUS)
        .to_string()
}

fn task_view(store: &DataStore, task_id: &str, expires: u64) -> TaskView {
    let task = store.task(task_id).expect("leased task exists");
    let question = store.question(&task.question_id).expect("task question exists");
    TaskView {
        task_id: task.task_id.clone(),
        question: question.text(),
        shown_answer: task.shown_answer.clone(),
        candidates: task
            .candidate_image_ids
            .iter()
            .map(|id| CandidateView {
                image_id: id.clone(),
                display_uri: store.image(id).and_then(|i| i.display_uri.clone()),
            })
            .collect(),
        allows_not_possible: true,
        lease_expires: expires,
    }
}

/// The caller's own live lease if it has one, else the first open task in id
/// order that nobody else holds.
async fn next_task(State(state): State<Shared>, headers: HeaderMap) -> Response {
    let who = annotator(&headers);
    let now = (state.clock)();
    let mut inner = state.inner.write().expect("lock poisoned");
    let Inner { store, leases } = &mut *inner;
    leases.retain(|id, l| l.expires > now && store.task(id).is_some_and(|t| t.status == TaskStatus::Open));
    let mine = leases.iter().find(|(_, l)| l.annotator == who).map(|(id, _)| id.clone());
    let chosen = mine.or_else(|| {
        store
            .tasks()
            .find(|t| t.status == TaskStatus::Open && !leases.contains_key(&t.task_id))
            .map(|t| t.task_id.clone())
    });
    let Some(task_id) = chosen else {
        return StatusCode::NO_CONTENT.into_response();
    };
    let expires = now + state.lease_ttl.as_secs();
    leases.insert(
        task_id.clone(),
        Lease {
            annotator: who,
            expires,
        },
    );
    Json(task_view(store, &task_id, expires)).into_response()
}

async fn submit_result(
    State(state): State<Shared>,
    Path(task_id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<ResultBody>, JsonRejection>,
) -> Result<Json<ResultResponse>, ApiError> {
    let Json(body) = body?;
    let who = annotator(&headers);
    let now = (state.clock)();
    let mut inner = state.inner.write().expect("lock poisoned");
    let task = inner
        .store
        .task(&task_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown task {task_id}")))?;
    if task.status != TaskStatus::Open {
        // A repeat of the accepted submission succeeds without changing anything.
        let same = inner
            .store
            .result(&task_id)
            .is_some_and(|r| r.annotator_id == who && r.outcome == body.outcome);
        if same {
            return Ok(Json(ResultResponse {
                task_id,
                status: task.status,
            }));
        }
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("task {task_id} is already {}", task.status.as_str()),
        ));
    }
    if let Some(l) = inner.leases.get(&task_id) {
        if l.expires > now && l.annotator != who {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("task {task_id} is leased to another annotator"),
            ));
        }
    }
    let mut next = inner.store.clone();
    ingest_result(
        &mut next,
        AnnotationResult {
            task_id: task_id.clone(),
            outcome: body.outcome,
            annotator_id: who,
            timestamp: now,
        },
    )?;
    state.persist(&next)?;
    let status = next.task(&task_id).expect("exists").status;
    inner.store = next;
    inner.leases.remove(&task_id);
    Ok(Json(ResultResponse { task_id, status }))
}

/// The first picked task, in id order, whose second round is still open.
async fn next_round(State(state): State<Shared>) -> Response {
    let inner = state.inner.read().expect("lock poisoned");
    let store = &inner.store;
    let open = store.rounds().find(|r| !r.is_complete() && store.pair(&r.question_id).is_none());
    match open {
        None => StatusCode::NO_CONTENT.into_response(),
        Some(r) => Json(RoundView {
            task_id: r.task_id.clone(),
            question: store.question(&r.question_id).map(|q| q.text()).unwrap_or_default(),
            image_id: r.image_id.clone(),
            display_uri: store.image(&r.image_id).and_then(|i| i.display_uri.clone()),
            answers_collected: r.answers.len(),
        })
        .into_response(),
    }
}

async fn submit_answer(
    State(state): State<Shared>,
    body: Result<Json<AnswerBody>, JsonRejection>,
) -> Result<Json<AnswerResponse>, ApiError> {
    let Json(body) = body?;
    let mut inner = state.inner.write().expect("lock poisoned");
    let mut next = inner.store.clone();
    let pair = add_round_answer(&mut next, &body.task_id, &body.answer)?;
    state.persist(&next)?;
    let answers_collected = next.round(&body.task_id).map_or(0, |r| r.answers.len());
    inner.store = next;
    Ok(Json(AnswerResponse {
        task_id: body.task_id,
        answers_collected,
        pair,
    }))
}

async fn stats(State(state): State<Shared>) -> Json<BalanceReport> {
    let inner = state.inner.read().expect("lock poisoned");
    Json(balance_report(&balanced_snapshot(&inner.store)))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
