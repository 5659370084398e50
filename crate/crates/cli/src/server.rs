//! JSON HTTP API over an [`Engine`].

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use vidsearch_core::engine::{Engine, EngineConfig, EngineError, Overrides, SearchRequest};
use vidsearch_core::landmark::I2IParams;
use vidsearch_core::FrameKey;

pub struct AppState {
    engine: RwLock<Arc<Engine>>,
    config: EngineConfig,
    allow_reingest: bool,
}

impl AppState {
    pub fn new(mut engine: Engine, allow_reingest: bool) -> Arc<Self> {
        engine.set_reingest(allow_reingest);
        let config = engine.config().clone();
        Arc::new(Self { engine: RwLock::new(Arc::new(engine)), config, allow_reingest })
    }

    fn engine(&self) -> Arc<Engine> {
        self.engine.read().expect("engine lock poisoned").clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": { "kind": kind, "message": message.into() } }) }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::UnknownMode { allowed, .. } => Self {
                status: StatusCode::BAD_REQUEST,
                body: json!({ "error": { "kind": "unknown_mode", "message": message, "allowed_modes": allowed } }),
            },
            EngineError::Disabled { capabilities, .. } => Self {
                status: StatusCode::CONFLICT,
                body: json!({ "error": { "kind": "mode_disabled", "message": message, "capabilities": capabilities } }),
            },
            EngineError::BadRequest(_) => Self::new(StatusCode::BAD_REQUEST, "bad_request", message),
            EngineError::Config(_) | EngineError::Ingest(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "ingest_failed", message)
            }
            EngineError::Search(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "search_failed", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let text = if body.is_empty() { &b"{}"[..] } else { body };
    serde_json::from_slice(text).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

fn to_value(v: impl serde::Serialize) -> ApiResult {
    serde_json::to_value(v)
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

/// Runs engine work off the async threads; the engine's HTTP clients block.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn run_search(state: Arc<AppState>, req: SearchRequest) -> ApiResult {
    let engine = state.engine();
    let resp = blocking(move || engine.search(&req).map_err(ApiError::from)).await?;
    to_value(resp)
}

async fn search(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    run_search(state, parse_body(&body)?).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemporalBody {
    queries: Vec<String>,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    k_per_step: Option<usize>,
    #[serde(default)]
    include: Vec<String>,
    #[serde(default)]
    exclude: Vec<String>,
}

async fn temporal(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let b: TemporalBody = parse_body(&body)?;
    let req = SearchRequest {
        mode: "temporal".into(),
        query: None,
        queries: Some(b.queries),
        k: b.k,
        overrides: Overrides { k_per_step: b.k_per_step, include: b.include, exclude: b.exclude, ..Overrides::default() },
    };
    run_search(state, req).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct I2IBody {
    query: String,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    params: Option<I2IParams>,
    #[serde(default)]
    include: Vec<String>,
    #[serde(default)]
    exclude: Vec<String>,
}

async fn i2i(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let b: I2IBody = parse_body(&body)?;
    let req = SearchRequest {
        mode: "i2i".into(),
        query: Some(b.query),
        queries: None,
        k: b.k,
        overrides: Overrides { i2i: b.params, include: b.include, exclude: b.exclude, ..Overrides::default() },
    };
    run_search(state, req).await
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct IngestBody {
    include: Option<Vec<String>>,
    exclude: Option<Vec<String>>,
}

async fn ingest(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    if !state.allow_reingest {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "reingest_disabled",
            "the server is serving frozen indices; restart it with --allow-reingest to ingest",
        ));
    }
    let b: IngestBody = parse_body(&body)?;
    let mut config = state.config.clone();
    if let Some(i) = b.include {
        config.include = i;
    }
    if let Some(e) = b.exclude {
        config.exclude = e;
    }
    let report = blocking(move || {
        let mut fresh = Engine::ingest(config)?;
        fresh.set_reingest(true);
        let report = fresh.report().clone();
        // the previous snapshot is dropped here, off the async threads
        let _old = std::mem::replace(&mut *state.engine.write().expect("engine lock poisoned"), Arc::new(fresh));
        Ok(report)
    })
    .await?;
    to_value(report)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalBody {
    submission: String,
    ground_truth: String,
    #[serde(default)]
    ks: Option<Vec<usize>>,
}

async fn eval(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let b: EvalBody = parse_body(&body)?;
    let engine = state.engine();
    let report = blocking(move || engine.evaluate(&b.submission, &b.ground_truth, b.ks).map_err(ApiError::from)).await?;
    to_value(report)
}

async fn capabilities(State(state): State<Arc<AppState>>) -> ApiResult {
    let engine = state.engine();
    let out = blocking(move || Ok(json!({ "capabilities": engine.capabilities(), "report": engine.report() }))).await?;
    Ok(Json(out))
}

async fn frame(State(state): State<Arc<AppState>>, Path((group, video, frame)): Path<(String, String, String)>) -> ApiResult {
    let key = frame
        .parse::<u64>()
        .map_err(|_| format!("frame `{frame}` is not a non-negative integer"))
        .and_then(|f| FrameKey::new(&group, &video, f).map_err(|e| e.to_string()))
        .map_err(|m| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", m))?;
    let engine = state.engine();
    let info = blocking(move || Ok(engine.frame_info(&key))).await?;
    to_value(info)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/search", post(search))
        .route("/api/temporal", post(temporal))
        .route("/api/i2i", post(i2i))
        .route("/api/ingest", post(ingest))
        .route("/api/eval", post(eval))
        .route("/api/capabilities", get(capabilities))
        .route("/api/frame/{group}/{video}/{frame}", get(frame))
        .fallback(not_found)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
