//! HTTP/JSON boundary over the engine. All state lives in the engine and the
//! telemetry store; handlers only translate requests and errors.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use mixlab_core::rng::mix_seed;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::engine::{Engine, EngineConfig, EngineError};
use crate::generator::{Backend, RemoteGenerator, REMOTE_TIMEOUT};
use crate::model::{ModeKind, ModeRef, QuestionId};
use crate::telemetry::{StoreError, TelemetryStore};

/// Error body returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    pub http_status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_owned(),
            message: message.into(),
            http_status: status.as_u16(),
        }
    }

    fn malformed(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "MALFORMED_BODY", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }
}

/// HTTP status for an engine error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "UNKNOWN_SESSION" => StatusCode::NOT_FOUND,
        "SESSION_EXISTS" | "SESSION_ENDED" | "OUT_OF_ORDER" | "MODE_ALREADY_ACTIVE"
        | "NO_ACTIVE_MODE" | "NOT_IN_CHOICE_PHASE" | "MODE_NOT_PLAYING" | "DEADLINE_PASSED"
        | "WRONG_MODE" | "DUPLICATE_SAVE" | "MODES_INCOMPLETE" | "DUPLICATE_ANSWER"
        | "CLOCK_REGRESSION" => StatusCode::CONFLICT,
        "INVALID_LEVEL" | "INVALID_SET_INDEX" | "ALL_ZERO_WEIGHTS" | "LENGTH_MISMATCH"
        | "WEIGHT_OUT_OF_RANGE" | "UNKNOWN_IMAGE" | "OUT_OF_RANGE" => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        "REMOTE_UNAVAILABLE" | "MALFORMED_REMOTE_RESPONSE" => StatusCode::BAD_GATEWAY,
        "REMOTE_TIMEOUT" => StatusCode::GATEWAY_TIMEOUT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let code = e.code();
        Self::new(status_for(code), code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// Generator used for player generate calls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeneratorChoice {
    Procedural,
    Remote(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_dir: PathBuf,
    pub engine: EngineConfig,
    pub generator: GeneratorChoice,
    pub master_seed: u64,
    /// How often lapsed timers are applied; `None` leaves expiry to requests.
    pub sweep_interval: Option<Duration>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            port: 8080,
            data_dir: data_dir.into(),
            engine: EngineConfig::default(),
            generator: GeneratorChoice::Procedural,
            master_seed: 0,
            sweep_interval: Some(Duration::from_millis(500)),
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.engine.latent_dim == 0 {
            return Err(ServiceError::BadConfig("latent dim must be positive".into()));
        }
        if let GeneratorChoice::Remote(url) = &self.generator {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(ServiceError::BadConfig(format!(
                    "remote url '{url}' must start with http:// or https://"
                )));
            }
        }
        Ok(())
    }

    fn backend(&self) -> Backend {
        match &self.generator {
            GeneratorChoice::Procedural => Backend::Procedural,
            GeneratorChoice::Remote(url) => Backend::Remote(RemoteGenerator::new(url, REMOTE_TIMEOUT)),
        }
    }
}

/// Shared handler state.
pub struct AppState {
    engine: Arc<Engine>,
    clock: Arc<dyn Clock>,
    master_seed: u64,
    next_index: AtomicU64,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, clock: Arc<dyn Clock>, master_seed: u64) -> Self {
        Self {
            engine,
            clock,
            master_seed,
            next_index: AtomicU64::new(0),
        }
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/modes/{kind}/start", post(start_mode))
        .route("/sessions/{id}/challenge/choose", post(choose_set))
        .route("/sessions/{id}/generate", post(generate))
        .route("/sessions/{id}/save", post(save_image))
        .route("/sessions/{id}/finish", post(finish_mode))
        .route("/sessions/{id}/survey", post(submit_survey))
        .route("/sessions/{id}/end", post(end_session))
        .route("/sessions/{id}/events", get(events))
        .route("/images/{file}", get(image));
    Router::new()
        .nest("/api", api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such endpoint") })
        .with_state(state)
}

/// Runs `f` against the engine off the async workers, stamped with the
/// current clock reading.
async fn run<T, F>(state: &Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine, u64) -> Result<T, EngineError> + Send + 'static,
{
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || {
        let now = state.clock.now_ms();
        f(&state.engine, now).map_err(ApiError::from)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::malformed(e.to_string()))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Created {
    session_id: String,
    seed: u64,
}

async fn create_session(State(state): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateBody = if body.iter().all(u8::is_ascii_whitespace) {
        CreateBody::default()
    } else {
        parse(&body)?
    };
    let st = Arc::clone(&state);
    let created = run(&state, move |engine, now| loop {
        let n = st.next_index.fetch_add(1, Ordering::SeqCst);
        let id = format!("s{n:06}");
        if engine.session_exists(&id) {
            continue;
        }
        let seed = req.seed.unwrap_or_else(|| mix_seed(st.master_seed, n));
        match engine.start_session(&id, seed, now) {
            Ok(view) => {
                return Ok(Created {
                    session_id: view.session_id,
                    seed,
                })
            }
            Err(EngineError::SessionExists(_)) => continue,
            Err(e) => return Err(e),
        }
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let view = run(&state, move |engine, _| engine.session(&id)).await?;
    Ok(Json(view).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartBody {
    level: Option<u8>,
}

async fn start_mode(
    State(state): State<Shared>,
    Path((id, kind)): Path<(String, String)>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let kind: ModeKind = kind.parse().map_err(|_| {
        ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_MODE", format!("unknown mode '{kind}'"))
    })?;
    let req: StartBody = if body.iter().all(u8::is_ascii_whitespace) {
        StartBody::default()
    } else {
        parse(&body)?
    };
    let view = run(&state, move |engine, now| {
        engine.expire_timers(&id, now)?;
        engine.start_mode(&id, ModeRef::new(kind, req.level), now)
    })
    .await?;
    Ok(Json(view).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChooseBody {
    set_index: i64,
}

async fn choose_set(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: ChooseBody = parse(&body)?;
    let view = run(&state, move |engine, now| engine.choose_set(&id, req.set_index, now)).await?;
    Ok(Json(view).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateBody {
    weights: Vec<f64>,
}

async fn generate(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: GenerateBody = parse(&body)?;
    let out = run(&state, move |engine, now| engine.generate(&id, &req.weights, now)).await?;
    Ok(Json(out).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaveBody {
    image_hash: String,
}

async fn save_image(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: SaveBody = parse(&body)?;
    let view = run(&state, move |engine, now| engine.save_image(&id, &req.image_hash, now)).await?;
    Ok(Json(view).into_response())
}

async fn finish_mode(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let view = run(&state, move |engine, now| engine.finish_mode(&id, now)).await?;
    Ok(Json(view).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurveyBody {
    question_id: QuestionId,
    rating: i64,
}

async fn submit_survey(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let req: SurveyBody = parse(&body)?;
    let view = run(&state, move |engine, now| {
        engine.expire_timers(&id, now)?;
        engine.submit_survey(&id, req.question_id, req.rating, now)
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn end_session(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let view = run(&state, move |engine, now| {
        engine.expire_timers(&id, now)?;
        engine.end_session(&id, now)
    })
    .await?;
    Ok(Json(view).into_response())
}

async fn events(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let events = run(&state, move |engine, _| engine.events(&id)).await?;
    let mut body = String::new();
    for e in &events {
        body.push_str(&serde_json::to_string(e).map_err(|e| ApiError::internal(e.to_string()))?);
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct ImageQuery {
    inline: Option<u8>,
}

#[derive(Debug, Serialize)]
struct InlineImage {
    image_hash: String,
    png_base64: String,
}

async fn image(
    State(state): State<Shared>,
    Path(file): Path<String>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ApiError> {
    let not_found =
        || ApiError::new(StatusCode::NOT_FOUND, "IMAGE_NOT_FOUND", format!("no image '{file}'"));
    let hash = file.strip_suffix(".png").ok_or_else(not_found)?.to_owned();
    let store = Arc::clone(state.engine.store());
    let lookup = hash.clone();
    let bytes = tokio::task::spawn_blocking(move || store.fetch_image(&lookup))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let bytes = match bytes {
        Ok(b) => b,
        Err(StoreError::UnknownHash(_)) => return Err(not_found()),
        Err(e) => return Err(ApiError::from(EngineError::from(e))),
    };
    if q.inline.unwrap_or(0) != 0 {
        let png_base64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
        return Ok(Json(InlineImage {
            image_hash: hash,
            png_base64,
        })
        .into_response());
    }
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

/// Applies lapsed deadlines on every session with an active mode.
pub fn sweep(engine: &Engine, now: u64) {
    for id in engine.active_session_ids() {
        if let Err(e) = engine.expire_timers(&id, now) {
            log::warn!("timer sweep on {id} failed: {e}");
        }
    }
}

/// A bound but not yet running service.
pub struct Server {
    listener: tokio::net::TcpListener,
    app: Router,
    state: Shared,
    sweep_interval: Option<Duration>,
}

impl Server {
    /// Opens the store, builds the engine, and binds the port.
    pub async fn bind(config: &ServiceConfig) -> Result<Self, ServiceError> {
        Self::bind_with_clock(config, Arc::new(SystemClock)).await
    }

    pub async fn bind_with_clock(
        config: &ServiceConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        let store = TelemetryStore::open(&config.data_dir)
            .map_err(|e| ServiceError::BadConfig(format!("data dir: {e}")))?;
        let engine = Arc::new(Engine::new(Arc::new(store), config.engine, config.backend()));
        let state = Arc::new(AppState::new(engine, clock, config.master_seed));
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", config.port))
            .await
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AddrInUse => ServiceError::PortInUse(config.port),
                _ => ServiceError::Io(e),
            })?;
        Ok(Self {
            listener,
            app: router(Arc::clone(&state)),
            state,
            sweep_interval: config.sweep_interval,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn state(&self) -> &Shared {
        &self.state
    }

    /// Serves until `shutdown` resolves, then drains in-flight requests.
    pub async fn run<F>(self, shutdown: F) -> Result<(), ServiceError>
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        let sweeper = self.sweep_interval.map(|every| {
            let state = Arc::clone(&self.state);
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(every);
                loop {
                    tick.tick().await;
                    let st = Arc::clone(&state);
                    let _ = tokio::task::spawn_blocking(move || sweep(&st.engine, st.clock.now_ms())).await;
                }
            })
        });
        let result = axum::serve(self.listener, self.app)
            .with_graceful_shutdown(shutdown)
            .await;
        if let Some(task) = sweeper {
            task.abort();
        }
        // Appends are synced before they are acknowledged, so the log is
        // already complete here.
        log::info!("service stopped");
        result.map_err(ServiceError::Io)
    }
}
