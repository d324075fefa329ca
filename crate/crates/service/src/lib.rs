//! Deployable endpoints for header gossip.
//!
//! [`server`] holds the shared server view and an axum middleware that any
//! router can mount. [`daemon`] is the client side: a proxy hook for passive
//! gossip, active polling and the timestamp and staleness alerts.

pub mod daemon;
pub mod server;
pub mod transport;

pub use daemon::{run_client_daemon, ClientDaemon, ClientDaemonConfig, DaemonAlert, DaemonHandle};
pub use server::{serve, serve_app, with_gossip, ServeConfig, ServerHandle, ServerState, ServerStats, StatusV1};
pub use transport::HttpBodyTransport;

use sentinel_core::gossip::GossipError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("http: {0}")]
    Http(String),
    #[error(transparent)]
    Gossip(#[from] GossipError),
    #[error("background task failed: {0}")]
    Task(String),
}

pub(crate) fn unix_now() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}
