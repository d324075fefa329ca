//! Server view shared by request handlers, and the middleware that runs
//! gossip exchanges on whatever application it wraps.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use sentinel_core::gossip::{
    decode_http_body_transport, decode_http_header_transport, encode_http_body_transport,
    encode_http_header_transport, is_gossip_field, server_respond, GossipConfig, GossipMessage,
};
use sentinel_core::HeaderWindow;

use crate::{unix_now, ServiceError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServerStats {
    pub exchanges: u64,
    pub headers_accepted: u64,
    pub headers_rejected: u64,
    pub last_update_time: Option<i64>,
}

/// One committed version of the server state.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub version: u64,
    pub window: Arc<HeaderWindow>,
    pub stats: ServerStats,
}

/// Shared server view. Exchanges compute against a snapshot without holding
/// the lock and commit only if nobody else committed in between; otherwise
/// they recompute.
#[derive(Debug)]
pub struct ServerState {
    cfg: GossipConfig,
    current: Mutex<Arc<Snapshot>>,
}

impl ServerState {
    pub fn new(window: HeaderWindow, cfg: GossipConfig) -> Self {
        let snap = Snapshot { version: 0, window: Arc::new(window), stats: ServerStats::default() };
        ServerState { cfg, current: Mutex::new(Arc::new(snap)) }
    }

    pub fn config(&self) -> &GossipConfig {
        &self.cfg
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.lock().expect("state lock poisoned").clone()
    }

    /// Runs one server leg and returns the reply.
    pub fn exchange(&self, msg: &GossipMessage, now: i64) -> GossipMessage {
        loop {
            let snap = self.snapshot();
            let resp = server_respond(&snap.window, msg, &self.cfg);
            let mut guard = self.current.lock().expect("state lock poisoned");
            if guard.version != snap.version {
                continue;
            }
            let mut stats = snap.stats;
            stats.exchanges += 1;
            if let Some(res) = &resp.resolution {
                stats.headers_accepted += res.report.learned as u64;
                stats.headers_rejected += res.report.dropped as u64;
            }
            if resp.error.is_some() {
                stats.headers_rejected += msg.payload_range().map_or(0, |r| r.len());
            }
            let window = if resp.window != *snap.window {
                stats.last_update_time = Some(now);
                Arc::new(resp.window)
            } else {
                snap.window.clone()
            };
            *guard = Arc::new(Snapshot { version: snap.version + 1, window, stats });
            return resp.reply;
        }
    }

    pub fn status(&self) -> StatusV1 {
        let snap = self.snapshot();
        let tip = snap.window.tip();
        StatusV1 {
            version: "v1".to_string(),
            tip_height: tip.map(|t| t.height),
            tip_hash: snap.window.tip_hash().map(|h| h.to_string()),
            head_height: snap.window.head_height(),
            weight: snap.window.weight().ok().map(|w| w.to_string()),
            last_update_time: snap.stats.last_update_time,
            stats: snap.stats,
        }
    }
}

/// Body of `GET /gossip/status`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StatusV1 {
    pub version: String,
    pub tip_height: Option<u64>,
    pub tip_hash: Option<String>,
    pub head_height: Option<u64>,
    /// Cumulative target of the window, hex.
    pub weight: Option<String>,
    pub last_update_time: Option<i64>,
    pub stats: ServerStats,
}

/// Requests without gossip fields reach `next` untouched and their responses
/// come back untouched. Otherwise the fields are stripped from the request,
/// the exchange runs, and the reply fields are added to the response.
pub async fn gossip_middleware(State(state): State<Arc<ServerState>>, mut req: Request, next: Next) -> Response {
    let fields: Vec<(String, String)> = req
        .headers()
        .iter()
        .filter(|(n, _)| is_gossip_field(n.as_str()))
        .filter_map(|(n, v)| Some((n.as_str().to_string(), v.to_str().ok()?.to_string())))
        .collect();
    if fields.is_empty() {
        return next.run(req).await;
    }
    let names: Vec<HeaderName> = req.headers().keys().filter(|n| is_gossip_field(n.as_str())).cloned().collect();
    for n in names {
        req.headers_mut().remove(n);
    }
    let reply = match decode_http_header_transport(fields.iter().map(|(n, v)| (n.as_str(), v.as_str()))) {
        Ok(Some(msg)) => Some(state.exchange(&msg, unix_now())),
        Ok(None) => None,
        Err(e) => {
            tracing::debug!(error = %e, "ignoring malformed gossip fields");
            None
        }
    };
    let mut resp = next.run(req).await;
    let Some(reply) = reply else { return resp };
    match encode_http_header_transport(&reply, state.config().header_budget_bytes) {
        Ok(out) => {
            for (n, v) in out {
                if let (Ok(n), Ok(v)) = (HeaderName::try_from(n), HeaderValue::try_from(v)) {
                    resp.headers_mut().append(n, v);
                }
            }
        }
        Err(e) => tracing::debug!(error = %e, "gossip reply omitted"),
    }
    resp
}

async fn status_handler(State(state): State<Arc<ServerState>>) -> Json<StatusV1> {
    Json(state.status())
}

async fn exchange_handler(State(state): State<Arc<ServerState>>, body: Bytes) -> Response {
    match decode_http_body_transport(&body) {
        Ok(msg) => {
            let reply = state.exchange(&msg, unix_now());
            let (ct, bytes) = encode_http_body_transport(&reply);
            ([(header::CONTENT_TYPE, ct)], bytes).into_response()
        }
        Err(e) => (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    }
}

/// `GET /gossip/status` and `POST /gossip/exchange`.
pub fn gossip_routes(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/gossip/status", get(status_handler))
        .route("/gossip/exchange", post(exchange_handler))
        .with_state(state)
}

/// Mounts the gossip endpoints and middleware on an application router.
pub fn with_gossip(app: Router, state: Arc<ServerState>) -> Router {
    app.merge(gossip_routes(state.clone())).layer(middleware::from_fn_with_state(state, gossip_middleware))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub listen: SocketAddr,
    pub window_capacity: usize,
    pub gossip: GossipConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { listen: SocketAddr::from(([127, 0, 0, 1], 8333)), window_capacity: 2016, gossip: GossipConfig::default() }
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: Arc<ServerState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServerHandle {
    pub async fn shutdown(mut self) -> Result<(), ServiceError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.map_err(|e| ServiceError::Task(e.to_string()))?.map_err(|e| ServiceError::Http(e.to_string()))
    }

    /// Runs until the server stops on its own.
    pub async fn wait(mut self) -> Result<(), ServiceError> {
        let _keep = self.shutdown.take();
        (&mut self.task).await.map_err(|e| ServiceError::Task(e.to_string()))?.map_err(|e| ServiceError::Http(e.to_string()))
    }
}

/// Serves a placeholder application with gossip mounted.
pub async fn serve(cfg: ServeConfig, initial: Option<HeaderWindow>) -> Result<ServerHandle, ServiceError> {
    let app = Router::new().route("/", get(|| async { "sentinel gossip server\n" }));
    serve_app(cfg, initial, app).await
}

pub async fn serve_app(cfg: ServeConfig, initial: Option<HeaderWindow>, app: Router) -> Result<ServerHandle, ServiceError> {
    if cfg.window_capacity == 0 {
        return Err(ServiceError::Config("window capacity must be positive".into()));
    }
    let window = initial.unwrap_or_else(|| HeaderWindow::new(cfg.window_capacity));
    let state = Arc::new(ServerState::new(window, cfg.gossip));
    let listener = tokio::net::TcpListener::bind(cfg.listen)
        .await
        .map_err(|source| ServiceError::Bind { addr: cfg.listen.to_string(), source })?;
    let addr = listener.local_addr().map_err(|source| ServiceError::Bind { addr: cfg.listen.to_string(), source })?;
    let router = with_gossip(app, state.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!(%addr, "gossip server listening");
    Ok(ServerHandle { addr, state, shutdown: Some(tx), task })
}
