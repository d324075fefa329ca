use std::time::Duration;

use sentinel_core::gossip::{
    decode_http_body_transport, encode_http_body_transport, GossipError, GossipMessage, GossipTransport,
};

/// Blocking client for `POST /gossip/exchange`. A 404 marks a server that does
/// not run the protocol.
pub struct HttpBodyTransport {
    client: reqwest::blocking::Client,
}

impl HttpBodyTransport {
    pub fn new(timeout: Duration) -> Result<Self, GossipError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GossipError::Transport(e.to_string()))?;
        Ok(HttpBodyTransport { client })
    }
}

impl GossipTransport for HttpBodyTransport {
    fn exchange(&mut self, server: &str, msg: &GossipMessage) -> Result<Option<GossipMessage>, GossipError> {
        let (ct, body) = encode_http_body_transport(msg);
        let url = format!("{}/gossip/exchange", server.trim_end_matches('/'));
        let resp = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, ct)
            .body(body)
            .send()
            .map_err(|e| GossipError::Transport(e.to_string()))?;
        if resp.status() == reqwest::StatusCode::NOT_FOUND {
            return Ok(None);
        }
        if !resp.status().is_success() {
            return Err(GossipError::Transport(format!("status {}", resp.status())));
        }
        let bytes = resp.bytes().map_err(|e| GossipError::Transport(e.to_string()))?;
        decode_http_body_transport(&bytes).map(Some)
    }
}
