//! Inspection station service.
//!
//! Plates are posted as PNG bytes, classified against a frozen checkpoint
//! and recorded durably before the response goes out. Human reviews attach
//! to records and feed a label export stream; the status light, queue and
//! statistics are all views over the record log.
//!
//! Routes:
//!
//! - `POST /inspect` (body: 224x224 8-bit grayscale PNG) → record
//! - `GET /queue?filter=unreviewed|all&page=N&page_size=M` → page of records
//! - `POST /records/{id}/review` (`{"verdict": "defective", "reviewer": "ana"}`) → record
//! - `GET /stats`, `GET /light`

pub mod error;
pub mod model;
pub mod store;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State as AxState};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use defectnet::data::Label;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use error::{Error, Result};
pub use model::{decode_plate, Classification, Classifier};
pub use store::{
    replay, Color, InspectionRecord, LightState, QueueFilter, QueuePage, Stats, Store,
};

/// Environment variable that supplies the store directory.
pub const STORE_ENV: &str = "INSPECT_STORE";

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<Store>>,
    model: Option<Arc<Classifier>>,
}

impl AppState {
    pub fn new(store: Store, model: Option<Classifier>) -> Self {
        AppState {
            store: Arc::new(Mutex::new(store)),
            model: model.map(Arc::new),
        }
    }

    pub fn open(store_dir: &Path, model: Option<Classifier>) -> Result<Self> {
        Ok(AppState::new(Store::open(store_dir)?, model))
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl IntoResponse for Error {
    fn into_response(self) -> Response {
        let (status, body) = match &self {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, json!({"error": self.to_string()})),
            Error::Conflict(_) => (StatusCode::CONFLICT, json!({"error": self.to_string()})),
            Error::Dimensions { expected, actual } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": self.to_string(), "expected": expected, "actual": actual}),
            ),
            Error::Image(_) => (StatusCode::BAD_REQUEST, json!({"error": self.to_string()})),
            Error::NoModel => (
                StatusCode::SERVICE_UNAVAILABLE,
                json!({"error": self.to_string()}),
            ),
            _ => {
                log::error!("{self}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    json!({"error": self.to_string()}),
                )
            }
        };
        (status, Json(body)).into_response()
    }
}

fn join_error(e: tokio::task::JoinError) -> Error {
    Error::Corrupt(format!("worker task failed: {e}"))
}

async fn with_store<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&mut Store) -> Result<T> + Send + 'static,
) -> Result<T> {
    let store = state.store.clone();
    tokio::task::spawn_blocking(move || {
        let mut guard = store.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    })
    .await
    .map_err(join_error)?
}

async fn inspect(AxState(state): AxState<AppState>, body: Bytes) -> Result<Json<InspectionRecord>> {
    let model = state.model.clone().ok_or(Error::NoModel)?;
    let png = body.clone();
    let c = tokio::task::spawn_blocking(move || -> Result<Classification> {
        let x = decode_plate(&png)?;
        model.classify(&x)
    })
    .await
    .map_err(join_error)??;
    let record = with_store(&state, move |s| {
        s.record_inspection(&body, now_ms(), c.verdict, c.confidence, c.latency_ms)
    })
    .await?;
    Ok(Json(record))
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    filter: Option<QueueFilter>,
    page: Option<usize>,
    page_size: Option<usize>,
}

async fn queue(
    AxState(state): AxState<AppState>,
    Query(q): Query<QueueParams>,
) -> Result<Json<QueuePage>> {
    let page = with_store(&state, move |s| {
        Ok(s.state().queue(
            q.filter.unwrap_or(QueueFilter::Unreviewed),
            q.page.unwrap_or(1),
            q.page_size.unwrap_or(store::DEFAULT_PAGE_SIZE),
        ))
    })
    .await?;
    Ok(Json(page))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub verdict: Label,
    pub reviewer: String,
}

async fn review(
    AxState(state): AxState<AppState>,
    UrlPath(id): UrlPath<u64>,
    Json(req): Json<ReviewRequest>,
) -> Result<Json<InspectionRecord>> {
    let record = with_store(&state, move |s| {
        s.record_review(id, req.verdict, &req.reviewer, now_ms())
    })
    .await?;
    Ok(Json(record))
}

async fn stats(AxState(state): AxState<AppState>) -> Result<Json<Stats>> {
    Ok(Json(with_store(&state, |s| Ok(s.state().stats())).await?))
}

async fn light(AxState(state): AxState<AppState>) -> Result<Json<LightState>> {
    Ok(Json(with_store(&state, |s| Ok(s.state().light())).await?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/inspect", post(inspect))
        .route("/queue", get(queue))
        .route("/records/{id}/review", post(review))
        .route("/stats", get(stats))
        .route("/light", get(light))
        .with_state(state)
}

/// Serve until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
