//! JSON-over-HTTP review queue for candidates the triage policy leaves to a
//! human, with an append-only verdict log.

mod state;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

pub use state::{
    ChannelView, QueueItem, ReviewState, ReviewStats, SampleView, VerdictAck, VerdictLabel, VerdictRecord,
    VerdictRequest,
};

pub const DEFAULT_QUEUE_LIMIT: usize = 50;
pub const MAX_QUEUE_LIMIT: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("not found: {0}")]
    NotFound(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("{0}")]
    Setup(String),

    #[error(transparent)]
    Core(#[from] stackvet::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let status = match self {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::BadRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

pub type Shared = Arc<RwLock<ReviewState>>;

fn read(s: &Shared) -> std::sync::RwLockReadGuard<'_, ReviewState> {
    s.read().unwrap_or_else(|p| p.into_inner())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn queue(
    State(s): State<Shared>,
    Query(q): Query<BTreeMap<String, String>>,
) -> Result<Json<Vec<QueueItem>>, ReviewError> {
    let limit = match q.get("limit") {
        None => DEFAULT_QUEUE_LIMIT,
        Some(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n <= MAX_QUEUE_LIMIT)
            .ok_or_else(|| ReviewError::BadRequest(format!("limit must be an integer in 0..={MAX_QUEUE_LIMIT}, got {v:?}")))?,
    };
    Ok(Json(read(&s).queue(limit)))
}

async fn sample(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<SampleView>, ReviewError> {
    Ok(Json(read(&s).sample(&id)?))
}

async fn verdict(State(s): State<Shared>, body: Bytes) -> Result<Json<VerdictAck>, ReviewError> {
    let req: VerdictRequest = serde_json::from_slice(&body).map_err(|e| ReviewError::BadRequest(e.to_string()))?;
    // the write lock is the single writer; the ack goes out only after the
    // line is synced
    let mut guard = s.write().unwrap_or_else(|p| p.into_inner());
    Ok(Json(guard.post_verdict(req)?))
}

async fn stats(State(s): State<Shared>) -> Json<ReviewStats> {
    Json(read(&s).stats())
}

async fn not_found() -> ReviewError {
    ReviewError::NotFound("no such endpoint".into())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/queue", get(queue))
        .route("/api/sample/{id}", get(sample))
        .route("/api/verdict", post(verdict))
        .route("/api/stats", get(stats))
        .fallback(not_found)
        .with_state(state)
}

/// Serves until ctrl-c. Binding errors (port in use) are returned.
pub async fn serve(state: ReviewState, addr: SocketAddr) -> Result<(), ReviewError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let app = router(Arc::new(RwLock::new(state)));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
