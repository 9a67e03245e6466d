//! HTTP session service for the recloop environment.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/v1/sessions` | open an episode; 201, 400, 422 unknown item, 503 at capacity |
//! | POST | `/v1/sessions/{id}/continue` | submit generated text; 404, 409 terminal, 410 expired |
//! | GET | `/v1/sessions/{id}` | state snapshot |
//! | POST | `/v1/score` | stateless scoring of a trajectory record; 400 names the bad field |
//! | GET | `/v1/items/{id}` | catalog record |
//! | GET | `/healthz` | `ok` |

pub mod api;
pub mod client;
mod sessions;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tokio::sync::oneshot;
use tower_http::timeout::TimeoutLayer;

use recloop_core::config::ServerSection;
use recloop_core::protocol::{render_initial_context, render_system_prompt};
use recloop_core::rewards::{score_trajectory, RewardError};
use recloop_core::rollout::{Episode, EpisodeError, EpisodeResult, FinishReason, Step};
use recloop_core::{Environment, InteractionSequence, ItemId};

use api::*;
use sessions::{lock, SessionStore, Slot};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerConfig {
    pub session_ttl: Duration,
    pub max_sessions: usize,
    pub request_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self::from_section(&ServerSection::default())
    }
}

impl ServerConfig {
    pub fn from_section(s: &ServerSection) -> Self {
        ServerConfig {
            session_ttl: Duration::from_secs(s.session_ttl_secs),
            max_sessions: s.max_sessions,
            request_timeout: Duration::from_secs(s.request_timeout_secs),
        }
    }
}

#[derive(Debug)]
pub struct AppState {
    env: Arc<Environment>,
    sessions: SessionStore,
}

impl AppState {
    pub fn new(env: Arc<Environment>, config: &ServerConfig) -> Self {
        AppState {
            env,
            sessions: SessionStore::new(config.session_ttl, config.max_sessions),
        }
    }
}

type Shared = State<Arc<AppState>>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: message.into(),
            path: None,
            item: None,
        }),
    )
        .into_response()
}

#[allow(clippy::result_large_err)]
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        (
            StatusCode::BAD_REQUEST,
            Json(ErrorBody {
                error: e.inner().to_string(),
                path: Some(path),
                item: None,
            }),
        )
            .into_response()
    })
}

fn unknown_item(item: String) -> Response {
    (
        StatusCode::UNPROCESSABLE_ENTITY,
        Json(ErrorBody {
            error: format!("unknown item {item}"),
            path: None,
            item: Some(item),
        }),
    )
        .into_response()
}

fn episode_error(e: EpisodeError) -> Response {
    let retryable = match &e {
        EpisodeError::Retrieval(r) | EpisodeError::Scoring(RewardError::Retrieval(r)) => r.is_retryable(),
        _ => false,
    };
    let status = if retryable {
        StatusCode::BAD_GATEWAY
    } else {
        StatusCode::INTERNAL_SERVER_ERROR
    };
    error(status, e.to_string())
}

pub fn router(state: Arc<AppState>, request_timeout: Duration) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/continue", post(continue_session))
        .route("/v1/score", post(score))
        .route("/v1/items/{id}", get(get_item))
        .layer(TimeoutLayer::with_status_code(StatusCode::REQUEST_TIMEOUT, request_timeout))
        .with_state(state)
}

#[allow(clippy::result_large_err)]
fn resolve(env: &Environment, item: &ItemRef) -> Result<ItemId, Response> {
    let catalog = env.catalog();
    match item {
        ItemRef::Id(id) if catalog.contains(*id) => Ok(*id),
        ItemRef::Id(id) => Err(unknown_item(id.to_string())),
        ItemRef::External(ext) => catalog.resolve_external(ext).ok_or_else(|| unknown_item(ext.clone())),
    }
}

async fn create_session(State(app): Shared, body: Bytes) -> Response {
    let req: CreateSession = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let env = &app.env;
    let refs: Vec<ItemRef> = match (req.items, req.external_ids) {
        (Some(_), Some(_)) => return error(StatusCode::BAD_REQUEST, "give items or external_ids, not both"),
        (Some(ids), None) => ids.into_iter().map(ItemRef::Id).collect(),
        (None, Some(ext)) => ext.into_iter().map(ItemRef::External).collect(),
        (None, None) => Vec::new(),
    };
    let mut items = Vec::with_capacity(refs.len());
    for r in &refs {
        match resolve(env, r) {
            Ok(id) => items.push(id),
            Err(resp) => return resp,
        }
    }
    if req.timestamps.as_ref().is_some_and(|t| t.len() != items.len()) {
        return error(StatusCode::BAD_REQUEST, "timestamps must match the history length");
    }
    let label = match resolve(env, &req.label) {
        Ok(id) => id,
        Err(resp) => return resp,
    };
    let mut config = env.rollout;
    if let Some(o) = req.overrides {
        config.max_turns = o.max_turns.unwrap_or(config.max_turns);
        config.k_retrieve = o.k_retrieve.unwrap_or(config.k_retrieve);
        config.char_budget = o.char_budget.unwrap_or(config.char_budget);
        config.mask_history = o.mask_history.unwrap_or(config.mask_history);
    }
    let history = InteractionSequence {
        user_id: req.user_id,
        items,
        timestamps: req.timestamps,
    };
    let initial_context = render_initial_context(history.items.iter().map(|&i| env.catalog().title(i)));
    let episode = match Episode::with_config(env, history, label, config) {
        Ok(e) => e,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let session_id = uuid::Uuid::new_v4().simple().to_string();
    if app.sessions.insert(session_id.clone(), episode).is_none() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "session capacity reached");
    }
    log::debug!("session {session_id} opened");
    (
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id,
            system_prompt: render_system_prompt(config.k_final),
            initial_context,
            expires_in_secs: app.sessions.ttl().as_secs(),
        }),
    )
        .into_response()
}

fn finished(result: &EpisodeResult, warning: Option<String>) -> ContinueResponse {
    let (reward_breakdown, trajectory, report) = (result.rewards, result.trajectory.clone(), result.report);
    if result.truncated {
        ContinueResponse::Truncated {
            reward_breakdown,
            trajectory,
            report,
            warning,
        }
    } else {
        ContinueResponse::Terminal {
            reward_breakdown,
            trajectory,
            report,
            warning,
        }
    }
}

fn continue_blocking(app: &AppState, id: &str, req: ContinueRequest) -> Response {
    let Some(handle) = app.sessions.get(id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let mut session = lock(&handle);
    let now = Instant::now();
    if matches!(session.slot, Slot::Live(_)) && session.expired(now, app.sessions.ttl()) {
        session.slot = Slot::Aborted;
    }
    let episode = match &mut session.slot {
        Slot::Live(e) => e,
        Slot::Terminal(_) => return error(StatusCode::CONFLICT, format!("session {id} is terminal")),
        Slot::Aborted => return error(StatusCode::GONE, format!("session {id} expired")),
    };
    let env = &app.env;
    let outcome = episode.submit(env, &req.generated_text).and_then(|out| {
        let warning = (out.ignored_bytes > 0)
            .then(|| format!("ignored {} bytes after the stop marker", out.ignored_bytes));
        Ok(match out.step {
            Step::Continue => match req.finish_reason {
                None => Err(ContinueResponse::Accepted { warning }),
                Some(FinishReason::Length) => Ok((episode.truncate(env)?, warning)),
                Some(FinishReason::Stop | FinishReason::End) => Ok((episode.end_generation(env)?, warning)),
            },
            Step::Retrieval { injected, items } => {
                let catalog = env.catalog();
                Err(ContinueResponse::Retrieval {
                    injected_text: injected,
                    items: items
                        .iter()
                        .map(|s| RetrievedItem {
                            item_id: s.item,
                            title: catalog.title(s.item).to_string(),
                            score: s.score,
                        })
                        .collect(),
                    m: episode.invocations(),
                    warning,
                })
            }
            Step::Finished(result) => Ok((*result, warning)),
        })
    });
    session.last_active = now;
    match outcome {
        Ok(Err(pending)) => Json(pending).into_response(),
        Ok(Ok((result, warning))) => {
            let body = finished(&result, warning);
            session.slot = Slot::Terminal(Box::new(result));
            Json(body).into_response()
        }
        Err(e) => {
            log::warn!("session {id} aborted: {e}");
            session.slot = Slot::Aborted;
            episode_error(e)
        }
    }
}

async fn continue_session(State(app): Shared, Path(id): Path<String>, body: Bytes) -> Response {
    let req: ContinueRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    tokio::task::spawn_blocking(move || continue_blocking(&app, &id, req))
        .await
        .unwrap_or_else(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn get_session(State(app): Shared, Path(id): Path<String>) -> Response {
    let Some(handle) = app.sessions.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let session = lock(&handle);
    let now = Instant::now();
    let ttl = app.sessions.ttl();
    let idle = now.saturating_duration_since(session.last_active);
    let expired = matches!(session.slot, Slot::Live(_)) && session.expired(now, ttl);
    let (state, m, context) = match &session.slot {
        Slot::Live(_) if expired => (SessionState::Aborted, 0, None),
        Slot::Live(e) => (SessionState::AwaitingGeneration, e.invocations(), Some(e.context().to_string())),
        Slot::Terminal(r) => (SessionState::Terminal, r.trajectory.m, None),
        Slot::Aborted => (SessionState::Aborted, 0, None),
    };
    Json(SessionSnapshot {
        session_id: id,
        state,
        m,
        context,
        idle_secs: idle.as_secs(),
        expires_in_secs: ttl.saturating_sub(idle).as_secs(),
    })
    .into_response()
}

async fn score(State(app): Shared, body: Bytes) -> Response {
    let req: ScoreRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if !app.env.catalog().contains(req.label) {
        return unknown_item(req.label.to_string());
    }
    tokio::task::spawn_blocking(move || {
        let mut config = app.env.rewards;
        if let Some(stage) = req.stage {
            config.stage = stage;
        }
        let t = &req.trajectory;
        match score_trajectory(&t.trajectory, &t.format, req.label, app.env.retriever(), &config) {
            Ok(b) => Json(b).into_response(),
            Err(RewardError::UnknownItem(i)) => unknown_item(i.to_string()),
            Err(e) => episode_error(EpisodeError::Scoring(e)),
        }
    })
    .await
    .unwrap_or_else(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn get_item(State(app): Shared, Path(id): Path<String>) -> Response {
    match id.parse::<u32>().ok().and_then(|i| app.env.catalog().get(ItemId(i))) {
        Some(record) => Json(record.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no item {id}")),
    }
}

/// Serves until `shutdown` resolves, sweeping expired sessions in the background.
pub async fn serve(
    listener: tokio::net::TcpListener,
    env: Arc<Environment>,
    config: ServerConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(env, &config));
    let sweeper_state = state.clone();
    let period = (config.session_ttl / 4).max(Duration::from_millis(20));
    let sweeper = tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper_state.sessions.sweep(Instant::now());
            if n > 0 {
                log::info!("expired {n} idle sessions");
            }
        }
    });
    let result = axum::serve(listener, router(state, config.request_timeout))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    result
}

/// A server running on its own thread and runtime; stops on drop.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn(env: Arc<Environment>, config: ServerConfig, addr: SocketAddr) -> std::io::Result<ServerHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        runtime.block_on(serve(listener, env, config, async {
            let _ = rx.await;
        }))
    });
    Ok(ServerHandle {
        addr,
        stop: Some(tx),
        thread: Some(thread),
    })
}
