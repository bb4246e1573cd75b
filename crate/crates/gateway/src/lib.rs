//! HTTP facade over a running coordinator: live state, the action log as a
//! server-sent-event stream, map snapshots, hazard injection and policy
//! knobs.
//!
//! | route | |
//! |---|---|
//! | `GET /state` | latest published world state plus its stream position `seq` |
//! | `GET /map` | map document |
//! | `GET /map.png` | live render |
//! | `GET /snapshots/{generation}.png` | render attached to a notification |
//! | `GET /events` | `action`, `state` (delta) and `snapshot` events, resumable with `Last-Event-ID` |
//! | `POST /inject` | `{kind, target, value?, x?, y?}` |
//! | `GET /config`, `PATCH /config` | policy |
//! | `POST /ack` | `{incident_id, operator?, note?}` |

pub mod engine;
pub mod hub;

use std::collections::VecDeque;
use std::convert::Infallible;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::{mpsc, Arc};
use std::thread;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use labguard_core::coordinator::{ConfigPatch, Coordinator, CoordinatorError, Event, Injection, DEFAULT_SNAPSHOT_BASE};
use labguard_core::model::MapDocument;
use labguard_core::notify::{spawn_delivery_worker, RetryPolicy, WebhookNotifier};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot};
use tracing::info;

use engine::{Command, Engine, Input};
use hub::{with_seq, Hub, StreamEvent, Subscription};

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub bind: IpAddr,
    pub port: u16,
    /// Incident notifications are POSTed here when set.
    pub webhook: Option<String>,
    pub retry: RetryPolicy,
    /// Stream events kept for resuming clients.
    pub history: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: DEFAULT_PORT,
            webhook: None,
            retry: RetryPolicy::default(),
            history: 4096,
        }
    }
}

#[derive(Clone)]
struct AppState {
    hub: Arc<Hub>,
    commands: mpsc::Sender<Command>,
    map: Arc<MapDocument>,
}

/// A bound, running gateway.
pub struct Gateway {
    addr: SocketAddr,
    commands: mpsc::Sender<Command>,
    stop: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<io::Result<()>>,
    engine: Option<thread::JoinHandle<()>>,
}

impl Gateway {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops the coordinator loop, ends open streams and waits for the
    /// server to drain.
    pub async fn shutdown(mut self) -> io::Result<()> {
        let _ = self.commands.send(Command::Shutdown);
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(engine) = self.engine.take() {
            let _ = tokio::task::spawn_blocking(move || engine.join()).await;
        }
        (&mut self.server).await.map_err(io::Error::other)?
    }
}

/// Binds the listener and starts the coordinator loop, the webhook worker
/// and the HTTP server.
pub async fn start(mut coordinator: Coordinator, config: GatewayConfig) -> io::Result<Gateway> {
    let listener = tokio::net::TcpListener::bind((config.bind, config.port)).await?;
    let addr = listener.local_addr()?;
    if coordinator.config().snapshot_base_url == DEFAULT_SNAPSHOT_BASE {
        let patch = ConfigPatch {
            snapshot_base_url: Some(format!("http://{addr}/snapshots")),
            ..ConfigPatch::default()
        };
        coordinator
            .handle(Event::Configure {
                t: coordinator.now(),
                patch,
            })
            .map_err(io::Error::other)?;
    }
    let state = serde_json::to_value(coordinator.state()).expect("state serializes");
    let hub = Arc::new(Hub::new(state, coordinator.config().clone(), config.history));
    let map = Arc::new(coordinator.map().to_document());
    let (tx, rx) = mpsc::channel();
    let webhook = config.webhook.as_ref().map(|url| {
        let receipts = tx.clone();
        let (payloads, _worker) = spawn_delivery_worker(WebhookNotifier::http(url.clone(), config.retry), move |r| {
            let _ = receipts.send(Command::Submit(Input::Receipt(r), None));
        });
        payloads
    });
    let engine = Engine::new(coordinator, hub.clone(), webhook).spawn(rx);
    let app = router(AppState {
        hub,
        commands: tx.clone(),
        map,
    });
    let (stop, stopped) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    info!(%addr, "gateway listening");
    Ok(Gateway {
        addr,
        commands: tx,
        stop: Some(stop),
        server,
        engine: Some(engine),
    })
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/map", get(get_map))
        .route("/map.png", get(get_map_png))
        .route("/snapshots/{file}", get(get_snapshot))
        .route("/events", get(get_events))
        .route("/inject", post(post_inject))
        .route("/config", get(get_config).patch(patch_config))
        .route("/ack", post(post_ack))
        .with_state(state)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<CoordinatorError> for ApiError {
    fn from(e: CoordinatorError) -> Self {
        let status = if e.is_not_found() {
            StatusCode::NOT_FOUND
        } else {
            StatusCode::UNPROCESSABLE_ENTITY
        };
        ApiError(status, e.to_string())
    }
}

fn unavailable() -> ApiError {
    ApiError(StatusCode::SERVICE_UNAVAILABLE, "coordinator is not running".into())
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

async fn submit(state: &AppState, input: Input) -> Result<Value, ApiError> {
    let (reply, result) = oneshot::channel();
    state
        .commands
        .send(Command::Submit(input, Some(reply)))
        .map_err(|_| unavailable())?;
    let actions = result.await.map_err(|_| unavailable())??;
    Ok(json!({ "actions": actions }))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_state(State(state): State<AppState>) -> Json<Value> {
    let (seq, value) = state.hub.state();
    Json(with_seq(seq, value))
}

async fn get_map(State(state): State<AppState>) -> Json<MapDocument> {
    Json((*state.map).clone())
}

async fn get_map_png(State(state): State<AppState>) -> Result<Response, ApiError> {
    let (reply, bytes) = oneshot::channel();
    state.commands.send(Command::RenderLive(reply)).map_err(|_| unavailable())?;
    Ok(png(bytes.await.map_err(|_| unavailable())?))
}

async fn get_snapshot(State(state): State<AppState>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no snapshot {file}"));
    let generation: u64 = file
        .strip_suffix(".png")
        .and_then(|g| g.parse().ok())
        .ok_or_else(not_found)?;
    let (reply, bytes) = oneshot::channel();
    state
        .commands
        .send(Command::Snapshot(generation, reply))
        .map_err(|_| unavailable())?;
    bytes.await.map_err(|_| unavailable())?.map(png).ok_or_else(not_found)
}

async fn post_inject(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let injection: Injection = parse_body(&body)?;
    submit(&state, Input::Inject(injection)).await.map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AckBody {
    incident_id: u64,
    #[serde(default)]
    operator: Option<String>,
    #[serde(default)]
    note: Option<String>,
}

async fn post_ack(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let ack: AckBody = parse_body(&body)?;
    let input = Input::Ack {
        incident_id: ack.incident_id,
        operator: ack.operator,
        note: ack.note,
    };
    submit(&state, input).await.map(Json)
}

async fn get_config(State(state): State<AppState>) -> Json<Value> {
    Json(serde_json::to_value(state.hub.config()).expect("config serializes"))
}

async fn patch_config(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let patch: ConfigPatch = parse_body(&body)?;
    submit(&state, Input::Configure(patch)).await?;
    Ok(get_config(State(state)).await)
}

struct Feed {
    hub: Arc<Hub>,
    rx: broadcast::Receiver<Arc<StreamEvent>>,
    last: u64,
    queue: VecDeque<SseEvent>,
}

impl Feed {
    fn absorb(&mut self, sub: Subscription) {
        self.rx = sub.receiver;
        self.last = sub.last_seq;
        if let Some(snapshot) = sub.snapshot {
            self.queue
                .push_back(SseEvent::default().id(sub.last_seq.to_string()).event("snapshot").data(snapshot));
        }
        for e in sub.backlog {
            self.push(&e);
        }
    }

    fn push(&mut self, e: &StreamEvent) {
        if e.seq > self.last {
            self.last = e.seq;
            self.queue
                .push_back(SseEvent::default().id(e.seq.to_string()).event(e.kind.as_str()).data(e.data.clone()));
        }
    }
}

async fn get_events(
    State(state): State<AppState>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ApiError> {
    let last_event_id = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let sub = state.hub.subscribe(last_event_id).ok_or_else(unavailable)?;
    let mut feed = Feed {
        hub: state.hub.clone(),
        rx: sub.receiver.resubscribe(),
        last: 0,
        queue: VecDeque::new(),
    };
    feed.absorb(sub);
    let events = stream::unfold(feed, |mut feed| async move {
        loop {
            if let Some(e) = feed.queue.pop_front() {
                return Some((Ok(e), feed));
            }
            match feed.rx.recv().await {
                Ok(e) => feed.push(&e),
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    let sub = feed.hub.subscribe(Some(feed.last))?;
                    feed.absorb(sub);
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}
