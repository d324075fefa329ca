//! `serve`, `daemon` and `check`.

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Router;
use bytes::Bytes;
use serde_json::json;

use sentinel_core::gossip::PollReport;
use sentinel_core::headers::HEADER_SIZE;
use sentinel_core::{BlockHeader, HeaderWindow};
use sentinel_service::{
    run_client_daemon, ClientDaemon, ClientDaemonConfig, DaemonAlert, DaemonHandle, HttpBodyTransport, ServeConfig,
};

use crate::{data_err, CliError};

/// Raw concatenated 80-byte headers into a window anchored at `anchor`.
pub fn load_headers(path: &Path, capacity: usize, anchor: u64) -> Result<HeaderWindow, CliError> {
    let bytes = std::fs::read(path).map_err(|e| data_err(path.display())(e.to_string()))?;
    if bytes.len() % HEADER_SIZE != 0 {
        return Err(CliError::Data(format!("{}: length {} is not a multiple of 80", path.display(), bytes.len())));
    }
    let headers = bytes
        .chunks(HEADER_SIZE)
        .map(BlockHeader::decode)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| data_err(path.display())(e.to_string()))?;
    HeaderWindow::from_headers(capacity, anchor, &headers).map_err(|e| data_err(path.display())(e.to_string()))
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::Data(format!("cannot start runtime: {e}")))
}

fn unix_now() -> i64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0)
}

pub fn serve(listen: SocketAddr, window: usize, headers: Option<&Path>, anchor: u64) -> Result<(), CliError> {
    if window == 0 {
        return Err(CliError::Usage("--window must be positive".into()));
    }
    let initial = headers.map(|p| load_headers(p, window, anchor)).transpose()?;
    runtime()?.block_on(async {
        let cfg = ServeConfig { listen, window_capacity: window, ..Default::default() };
        let handle = sentinel_service::serve(cfg, initial).await.map_err(|e| CliError::Data(e.to_string()))?;
        println!("listening on http://{}", handle.addr);
        let _ = std::io::stdout().flush();
        tokio::signal::ctrl_c().await.map_err(|e| CliError::Data(e.to_string()))?;
        handle.shutdown().await.map_err(|e| CliError::Data(e.to_string()))
    })
}

fn daemon_config(config: Option<&Path>, active_sample: Option<usize>) -> Result<ClientDaemonConfig, CliError> {
    let mut cfg = match config {
        Some(p) => ClientDaemonConfig::load(p).map_err(|e| CliError::Data(e.to_string()))?,
        None => ClientDaemonConfig::default(),
    };
    if let Some(n) = active_sample {
        if n == 0 {
            return Err(CliError::Usage("--active-sample must be positive".into()));
        }
        cfg.active_sample_size = n;
    }
    Ok(cfg)
}

fn initial_window(cfg: &ClientDaemonConfig, headers: Option<&Path>) -> Result<HeaderWindow, CliError> {
    match headers {
        Some(p) => load_headers(p, cfg.window_capacity, cfg.anchor_height),
        None => Ok(HeaderWindow::new(cfg.window_capacity)),
    }
}

fn poll_json(report: &PollReport, alerts: &[DaemonAlert]) -> serde_json::Value {
    let outcomes: Vec<_> = report
        .outcomes
        .iter()
        .map(|(server, o)| {
            json!({
                "server": server,
                "result": o.result,
                "forkHeight": o.fork_height,
                "lagBlocks": o.lag_blocks,
                "headersLearned": o.headers_learned,
            })
        })
        .collect();
    let errors: Vec<_> = report.errors.iter().map(|(s, e)| json!({ "server": s, "error": e.to_string() })).collect();
    json!({
        "polled": report.polled,
        "eclipseSuspected": report.eclipse_suspected,
        "outcomes": outcomes,
        "errors": errors,
        "nonProtocol": report.non_protocol,
        "tipHeight": report.window.tail_height(),
        "eclipseAlerts": alerts.iter().filter(|a| matches!(a, DaemonAlert::Eclipse { .. })).count(),
    })
}

pub fn check(
    config: Option<&Path>,
    servers: Vec<String>,
    headers: Option<&Path>,
    active_sample: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = daemon_config(config, active_sample)?;
    cfg.servers.extend(servers);
    if cfg.servers.is_empty() {
        return Err(CliError::Usage("no servers: pass --server or list them in --config".into()));
    }
    let window = initial_window(&cfg, headers)?;
    let timeout = Duration::from_secs(cfg.request_timeout_seconds);
    let now = unix_now();
    let mut daemon = ClientDaemon::new(cfg, window, now).map_err(|e| CliError::Data(e.to_string()))?;
    let mut transport = HttpBodyTransport::new(timeout).map_err(|e| CliError::Data(e.to_string()))?;
    let (report, alerts) = daemon.active_check(&mut transport, now);
    println!("{}", serde_json::to_string_pretty(&poll_json(&report, &alerts)).expect("serializable"));
    if report.outcomes.is_empty() && !report.errors.is_empty() {
        return Err(CliError::Data("no server could be reached".into()));
    }
    Ok(())
}

pub struct DaemonOptions {
    pub config: Option<PathBuf>,
    pub active_sample: Option<usize>,
    pub headers: Option<PathBuf>,
    pub proxy: Option<SocketAddr>,
    pub check_interval: u64,
    pub once: bool,
}

async fn proxy_handler(State(handle): State<Arc<DaemonHandle>>, req: Request) -> Response {
    let (parts, body) = req.into_parts();
    let body = match to_bytes(body, 64 << 20).await {
        Ok(b) => b,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    };
    let req = http::Request::from_parts(parts, Bytes::from(body));
    match handle.proxy(req).await {
        Ok(resp) => resp.map(Body::from).into_response(),
        Err(e) => (StatusCode::BAD_GATEWAY, e.to_string()).into_response(),
    }
}

fn print_alerts(alerts: &[DaemonAlert]) {
    for a in alerts {
        println!("{}", serde_json::to_string(a).expect("serializable"));
    }
    let _ = std::io::stdout().flush();
}

pub fn daemon(opts: DaemonOptions) -> Result<(), CliError> {
    let cfg = daemon_config(opts.config.as_deref(), opts.active_sample)?;
    let window = initial_window(&cfg, opts.headers.as_deref())?;
    let has_servers = !cfg.servers.is_empty();
    let tick = Duration::from_secs(cfg.tick_seconds);
    runtime()?.block_on(async move {
        let handle = Arc::new(run_client_daemon(cfg, Some(window)).map_err(|e| CliError::Data(e.to_string()))?);
        if opts.once {
            if has_servers {
                let (report, _) = handle.active_check().await.map_err(|e| CliError::Data(e.to_string()))?;
                println!("polled {} servers, eclipse suspected: {}", report.polled.len(), report.eclipse_suspected);
            }
            handle.tick();
            let alerts = handle.alerts();
            let count = |f: fn(&DaemonAlert) -> bool| alerts.iter().filter(|a| f(a)).count();
            println!(
                "alerts: eclipse {}, timing {}, stale {}",
                count(|a| matches!(a, DaemonAlert::Eclipse { .. })),
                count(|a| matches!(a, DaemonAlert::Timing { .. })),
                count(|a| matches!(a, DaemonAlert::Stale { .. })),
            );
            print_alerts(&alerts);
            return Ok(());
        }
        if let Some(addr) = opts.proxy {
            let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::Data(format!("cannot bind {addr}: {e}")))?;
            let bound = listener.local_addr().map_err(|e| CliError::Data(e.to_string()))?;
            let app = Router::new().fallback(proxy_handler).with_state(handle.clone());
            tokio::spawn(async move {
                if let Err(e) = axum::serve(listener, app).await {
                    tracing::error!(error = %e, "proxy listener stopped");
                }
            });
            println!("proxy listening on http://{bound}");
        }
        let mut ticks = tokio::time::interval(tick);
        let mut checks = tokio::time::interval(Duration::from_secs(opts.check_interval.max(1)));
        let mut seen = 0;
        loop {
            tokio::select! {
                _ = ticks.tick() => { handle.tick(); }
                _ = checks.tick(), if opts.check_interval > 0 && has_servers => {
                    if let Err(e) = handle.active_check().await {
                        tracing::warn!(error = %e, "active check failed");
                    }
                }
                r = tokio::signal::ctrl_c() => {
                    r.map_err(|e| CliError::Data(e.to_string()))?;
                    return Ok(());
                }
            }
            let alerts = handle.alerts();
            print_alerts(&alerts[seen..]);
            seen = alerts.len();
        }
    })
}
