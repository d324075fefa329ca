//! Client daemon: owns the local view and alert monitor, gossips on proxied
//! traffic, polls known servers on demand and raises alerts.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

use sentinel_core::alerts::{AlertEvent, AlertMonitor, BlockTimingModel};
use sentinel_core::chainview::resolve;
use sentinel_core::gossip::{
    active_poll, client_fulfill, client_initiate, decode_http_header_transport, encode_http_header_transport,
    is_gossip_field, GossipConfig, GossipMessage, GossipTransport, PollReport, ServerDirectory,
};
use sentinel_core::{BlockHeader, HeaderWindow};

use crate::transport::HttpBodyTransport;
use crate::{unix_now, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientDaemonConfig {
    pub window_capacity: usize,
    pub confirmations: usize,
    pub active_sample_size: usize,
    pub inactivity_alert_hours: f64,
    pub transport_budget_bytes: usize,
    pub anchor_height: u64,
    pub mean_block_minutes: f64,
    pub tick_seconds: u64,
    pub request_timeout_seconds: u64,
    /// Base URLs of servers known to run the protocol.
    pub servers: Vec<String>,
    pub gossip: GossipConfig,
}

impl Default for ClientDaemonConfig {
    fn default() -> Self {
        ClientDaemonConfig {
            window_capacity: 2016,
            confirmations: 6,
            active_sample_size: 3,
            inactivity_alert_hours: 8.0,
            transport_budget_bytes: 64 * 1024,
            anchor_height: 0,
            mean_block_minutes: 12.0,
            tick_seconds: 30,
            request_timeout_seconds: 10,
            servers: Vec::new(),
            gossip: GossipConfig::default(),
        }
    }
}

impl ClientDaemonConfig {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: &str| Err(ServiceError::Config(m.to_string()));
        if self.window_capacity == 0 {
            return bad("window_capacity must be positive");
        }
        if self.confirmations == 0 {
            return bad("confirmations must be positive");
        }
        if self.active_sample_size == 0 {
            return bad("active_sample_size must be positive");
        }
        if !(self.inactivity_alert_hours > 0.0) {
            return bad("inactivity_alert_hours must be positive");
        }
        if self.transport_budget_bytes == 0 {
            return bad("transport_budget_bytes must be positive");
        }
        if !(self.mean_block_minutes > 0.0) {
            return bad("mean_block_minutes must be positive");
        }
        if self.tick_seconds == 0 || self.request_timeout_seconds == 0 {
            return bad("tick_seconds and request_timeout_seconds must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum DaemonAlert {
    #[serde(rename_all = "camelCase")]
    Eclipse { time: i64, server: String, fork_height: Option<u64>, lag_blocks: u64 },
    Timing { event: AlertEvent },
    #[serde(rename_all = "camelCase")]
    Stale { time: i64, last_update: i64 },
}

/// Synchronous state owner. Every mutation of the view goes through here.
#[derive(Debug, Clone)]
pub struct ClientDaemon {
    cfg: ClientDaemonConfig,
    window: HeaderWindow,
    monitor: AlertMonitor,
    directory: ServerDirectory,
    pending: BTreeMap<String, GossipMessage>,
    last_update: i64,
    stale_alerted: bool,
    version: u64,
    alerts: Vec<DaemonAlert>,
}

impl ClientDaemon {
    pub fn new(cfg: ClientDaemonConfig, initial: HeaderWindow, now: i64) -> Result<Self, ServiceError> {
        cfg.validate()?;
        let mut monitor = AlertMonitor::new(BlockTimingModel::with_mean(cfg.mean_block_minutes), cfg.confirmations);
        for ih in initial.iter() {
            let ts = ih.header.timestamp as i64;
            monitor.state.observe_block(ts, ts);
        }
        monitor.state.current = monitor.engine.evaluate(&monitor.state, now);
        let mut directory = ServerDirectory::new();
        for s in &cfg.servers {
            directory.record(s, now);
        }
        Ok(ClientDaemon {
            cfg,
            window: initial,
            monitor,
            directory,
            pending: BTreeMap::new(),
            last_update: now,
            stale_alerted: false,
            version: 0,
            alerts: Vec::new(),
        })
    }

    pub fn config(&self) -> &ClientDaemonConfig {
        &self.cfg
    }

    pub fn window(&self) -> &HeaderWindow {
        &self.window
    }

    pub fn directory(&self) -> &ServerDirectory {
        &self.directory
    }

    pub fn alerts(&self) -> &[DaemonAlert] {
        &self.alerts
    }

    pub fn last_update(&self) -> i64 {
        self.last_update
    }

    fn raise(&mut self, alerts: Vec<DaemonAlert>) -> Vec<DaemonAlert> {
        for a in &alerts {
            tracing::warn!(alert = ?a, "daemon alert");
        }
        self.alerts.extend(alerts.iter().cloned());
        alerts
    }

    /// Replaces the view, feeding headers it did not hold to the monitor.
    fn adopt(&mut self, new: HeaderWindow, now: i64) -> Vec<DaemonAlert> {
        let learned: Vec<BlockHeader> = new
            .iter()
            .filter(|ih| self.window.hash_at(ih.height) != Some(ih.header.block_hash()))
            .map(|ih| ih.header)
            .collect();
        self.window = new;
        let mut out = Vec::new();
        if !learned.is_empty() {
            self.version += 1;
            self.last_update = now;
            self.stale_alerted = false;
        }
        for h in learned {
            out.extend(self.monitor.observe_block(h.timestamp as i64, now).into_iter().map(|event| DaemonAlert::Timing { event }));
        }
        out
    }

    /// A block delivered by the (possibly eclipsed) peer-to-peer network.
    pub fn observe_header(&mut self, header: BlockHeader, height: u64, now: i64) -> Result<Vec<DaemonAlert>, ServiceError> {
        let mut w = self.window.clone();
        w.append(header, height).map_err(|e| ServiceError::Config(e.to_string()))?;
        let alerts = self.adopt(w, now);
        Ok(self.raise(alerts))
    }

    /// Gossip fields to attach to a request bound for `server`. A follow-up
    /// owed to that server rides along.
    pub fn outgoing_fields(&mut self, server: &str) -> Vec<(String, String)> {
        let mut msg = client_initiate(&self.window, &self.cfg.gossip);
        if let Some(follow_up) = self.pending.remove(server) {
            msg.payload = follow_up.payload;
        }
        match encode_http_header_transport(&msg, self.cfg.transport_budget_bytes) {
            Ok(fields) => fields,
            Err(e) => {
                tracing::debug!(error = %e, "gossip fields omitted");
                Vec::new()
            }
        }
    }

    /// Handles the gossip part of a server's reply; `None` means the server
    /// does not run the protocol.
    pub fn absorb(&mut self, server: &str, reply: Option<&GossipMessage>, now: i64) -> Vec<DaemonAlert> {
        let Some(reply) = reply else { return Vec::new() };
        self.directory.record(server, now);
        let f = client_fulfill(&self.window, reply, &self.cfg.gossip);
        if let Some(e) = &f.error {
            tracing::debug!(server, error = %e, "server payload rejected");
        }
        let mut alerts = self.adopt(f.window, now);
        if let Some(follow_up) = f.follow_up {
            self.pending.insert(server.to_string(), follow_up);
        }
        if f.outcome.detects(&self.cfg.gossip) {
            alerts.push(DaemonAlert::Eclipse {
                time: now,
                server: server.to_string(),
                fork_height: f.outcome.fork_height,
                lag_blocks: f.outcome.lag_blocks,
            });
        }
        self.raise(alerts)
    }

    /// Periodic evaluation: timestamp alerts and the staleness alert.
    pub fn tick(&mut self, now: i64) -> Vec<DaemonAlert> {
        let mut alerts: Vec<DaemonAlert> =
            self.monitor.tick(now).into_iter().map(|event| DaemonAlert::Timing { event }).collect();
        let limit = (self.cfg.inactivity_alert_hours * 3600.0) as i64;
        if !self.stale_alerted && now - self.last_update > limit {
            self.stale_alerted = true;
            alerts.push(DaemonAlert::Stale { time: now, last_update: self.last_update });
        }
        self.raise(alerts)
    }

    /// Everything a poll needs, taken so the poll can run without the owner.
    pub fn poll_inputs(&self) -> (ServerDirectory, HeaderWindow, u64) {
        (self.directory.clone(), self.window.clone(), self.version)
    }

    /// Commits a poll computed from `poll_inputs` taken at `version`.
    pub fn commit_poll(&mut self, report: &PollReport, version: u64, now: i64) -> Vec<DaemonAlert> {
        for (server, _) in &report.outcomes {
            self.directory.record(server, now);
        }
        let new = if version == self.version {
            Some(report.window.clone())
        } else {
            let run: Vec<_> = report.window.iter().collect();
            resolve(&self.window, &run).ok().map(|r| r.window)
        };
        let mut alerts = new.map(|w| self.adopt(w, now)).unwrap_or_default();
        if report.eclipse_suspected {
            if let Some((server, outcome)) = report.outcomes.last() {
                alerts.push(DaemonAlert::Eclipse {
                    time: now,
                    server: server.clone(),
                    fork_height: outcome.fork_height,
                    lag_blocks: outcome.lag_blocks,
                });
            }
        }
        self.raise(alerts)
    }

    /// Runs an active poll in place with the given transport.
    pub fn active_check<T: GossipTransport + ?Sized>(&mut self, transport: &mut T, now: i64) -> (PollReport, Vec<DaemonAlert>) {
        let (d, w, v) = self.poll_inputs();
        let mut rng = rand::rngs::StdRng::from_os_rng();
        let report = active_poll(&d, &w, self.cfg.active_sample_size, &self.cfg.gossip, transport, &mut rng);
        let alerts = self.commit_poll(&report, v, now);
        (report, alerts)
    }
}

/// Async front for a [`ClientDaemon`] with a background ticker.
pub struct DaemonHandle {
    inner: Arc<Mutex<ClientDaemon>>,
    http: reqwest::Client,
    ticker: JoinHandle<()>,
}

/// Starts the ticker; must be called inside a tokio runtime.
pub fn run_client_daemon(cfg: ClientDaemonConfig, initial: Option<HeaderWindow>) -> Result<DaemonHandle, ServiceError> {
    let window = initial.unwrap_or_else(|| HeaderWindow::new(cfg.window_capacity));
    let tick = Duration::from_secs(cfg.tick_seconds);
    let http = reqwest::Client::builder()
        .timeout(Duration::from_secs(cfg.request_timeout_seconds))
        .build()
        .map_err(|e| ServiceError::Http(e.to_string()))?;
    let inner = Arc::new(Mutex::new(ClientDaemon::new(cfg, window, unix_now())?));
    let weak = Arc::downgrade(&inner);
    let ticker = tokio::spawn(async move {
        let mut interval = tokio::time::interval(tick);
        loop {
            interval.tick().await;
            let Some(inner) = weak.upgrade() else { break };
            inner.lock().expect("daemon lock poisoned").tick(unix_now());
        }
    });
    Ok(DaemonHandle { inner, http, ticker })
}

fn origin(uri: &http::Uri) -> Result<String, ServiceError> {
    match (uri.scheme_str(), uri.authority()) {
        (Some(s), Some(a)) => Ok(format!("{s}://{a}")),
        _ => Err(ServiceError::Http(format!("proxy needs an absolute URI, got {uri}"))),
    }
}

impl DaemonHandle {
    /// Runs `f` on the owner state.
    pub fn with<R>(&self, f: impl FnOnce(&mut ClientDaemon) -> R) -> R {
        f(&mut self.inner.lock().expect("daemon lock poisoned"))
    }

    pub fn alerts(&self) -> Vec<DaemonAlert> {
        self.with(|d| d.alerts().to_vec())
    }

    /// Forward-proxy hook: sends `req` (absolute URI) with gossip fields
    /// attached and returns the response with gossip fields removed.
    pub async fn proxy(&self, req: http::Request<Bytes>) -> Result<http::Response<Bytes>, ServiceError> {
        let server = origin(req.uri())?;
        let fields = self.with(|d| d.outgoing_fields(&server));
        let (parts, body) = req.into_parts();
        let mut out = self.http.request(parts.method, parts.uri.to_string()).body(body);
        for (n, v) in parts.headers.iter() {
            if !is_gossip_field(n.as_str()) {
                out = out.header(n, v);
            }
        }
        for (n, v) in &fields {
            out = out.header(n.as_str(), v.as_str());
        }
        let resp = out.send().await.map_err(|e| ServiceError::Http(e.to_string()))?;
        let status = resp.status();
        let version = resp.version();
        let headers = resp.headers().clone();
        let body = resp.bytes().await.map_err(|e| ServiceError::Http(e.to_string()))?;

        let gossip: Vec<(String, String)> = headers
            .iter()
            .filter(|(n, _)| is_gossip_field(n.as_str()))
            .filter_map(|(n, v)| Some((n.as_str().to_string(), v.to_str().ok()?.to_string())))
            .collect();
        match decode_http_header_transport(gossip.iter().map(|(n, v)| (n.as_str(), v.as_str()))) {
            Ok(reply) => {
                self.with(|d| d.absorb(&server, reply.as_ref(), unix_now()));
            }
            Err(e) => tracing::debug!(server, error = %e, "malformed gossip reply ignored"),
        }

        let mut builder = http::Response::builder().status(status).version(version);
        for (n, v) in headers.iter().filter(|(n, _)| !is_gossip_field(n.as_str())) {
            builder = builder.header(n, v);
        }
        builder.body(body).map_err(|e| ServiceError::Http(e.to_string()))
    }

    /// Polls a sample of known servers over the body transport without
    /// holding the owner across network calls.
    pub async fn active_check(&self) -> Result<(PollReport, Vec<DaemonAlert>), ServiceError> {
        let (d, w, v, sample, gossip, timeout) = self.with(|dm| {
            let (d, w, v) = dm.poll_inputs();
            let c = dm.config();
            (d, w, v, c.active_sample_size, c.gossip, Duration::from_secs(c.request_timeout_seconds))
        });
        let report = tokio::task::spawn_blocking(move || -> Result<PollReport, ServiceError> {
            let mut transport = HttpBodyTransport::new(timeout)?;
            let mut rng = rand::rngs::StdRng::from_os_rng();
            Ok(active_poll(&d, &w, sample, &gossip, &mut transport, &mut rng))
        })
        .await
        .map_err(|e| ServiceError::Task(e.to_string()))??;
        for (server, e) in &report.errors {
            tracing::debug!(server, error = %e, "active poll transport failure");
        }
        let alerts = self.with(|dm| dm.commit_poll(&report, v, unix_now()));
        Ok((report, alerts))
    }

    pub fn tick(&self) -> Vec<DaemonAlert> {
        self.with(|d| d.tick(unix_now()))
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        self.ticker.abort();
    }
}
