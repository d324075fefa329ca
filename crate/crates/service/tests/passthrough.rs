use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::routing::{get, post};
use axum::Router;
use http_body_util::BodyExt;
use sentinel_core::gossip::{
    client_fulfill, client_initiate, decode_http_header_transport, encode_http_header_transport, is_gossip_field,
    GossipConfig,
};
use sentinel_core::sim::chain::{ChainBuilder, EASY_BITS};
use sentinel_core::HeaderWindow;
use sentinel_service::{with_gossip, ServerState, StatusV1};
use tower::ServiceExt;

fn app() -> Router {
    Router::new()
        .route("/", get(|| async { "hello" }))
        .route("/echo", post(|body: String| async move { ([("x-app", "1"), ("set-cookie", "a=b")], body) }))
        .route("/teapot", get(|| async { (StatusCode::IM_A_TEAPOT, vec![0u8, 1, 2, 255]) }))
}

async fn raw(router: Router, req: Request<Body>) -> (StatusCode, Vec<(String, Vec<u8>)>, Vec<u8>) {
    let resp = router.oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().iter().map(|(n, v)| (n.to_string(), v.as_bytes().to_vec())).collect();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn requests() -> Vec<Request<Body>> {
    vec![
        Request::get("/").body(Body::empty()).unwrap(),
        Request::post("/echo").header("content-type", "text/plain").body(Body::from("payload \u{1F600}")).unwrap(),
        Request::get("/teapot").header("accept", "*/*").body(Body::empty()).unwrap(),
        Request::get("/missing").body(Body::empty()).unwrap(),
    ]
}

#[tokio::test]
async fn vanilla_requests_are_byte_identical() {
    let state = Arc::new(ServerState::new(HeaderWindow::new(2016), GossipConfig::default()));
    for (a, b) in requests().into_iter().zip(requests()) {
        let control = raw(app(), a).await;
        let wrapped = raw(with_gossip(app(), state.clone()), b).await;
        assert_eq!(control, wrapped);
    }
    assert_eq!(state.snapshot().stats.exchanges, 0);
}

#[tokio::test]
async fn fresh_server_learns_client_view() {
    let cfg = GossipConfig::default();
    let client = HeaderWindow::from_headers(2016, 0, &ChainBuilder::new(EASY_BITS).extend(72, 600)).unwrap();
    let state = Arc::new(ServerState::new(HeaderWindow::new(2016), cfg));
    let router = with_gossip(app(), state.clone());

    let send = |msg| {
        let mut req = Request::get("/").body(Body::empty()).unwrap();
        for (n, v) in encode_http_header_transport(&msg, cfg.header_budget_bytes).unwrap() {
            req.headers_mut().insert(axum::http::HeaderName::try_from(n).unwrap(), v.parse().unwrap());
        }
        req
    };
    let resp = router.clone().oneshot(send(client_initiate(&client, &cfg))).await.unwrap();
    let fields: Vec<(String, String)> = resp
        .headers()
        .iter()
        .filter(|(n, _)| is_gossip_field(n.as_str()))
        .map(|(n, v)| (n.to_string(), v.to_str().unwrap().to_string()))
        .collect();
    assert_eq!(to_bytes(resp.into_body(), 1 << 20).await.unwrap(), "hello");
    let reply = decode_http_header_transport(fields.iter().map(|(n, v)| (n.as_str(), v.as_str()))).unwrap().unwrap();
    let f = client_fulfill(&client, &reply, &cfg);
    assert_eq!(state.status().tip_height, None);

    router.clone().oneshot(send(f.follow_up.unwrap())).await.unwrap();
    let status: StatusV1 = {
        let resp = router.oneshot(Request::get("/gossip/status").body(Body::empty()).unwrap()).await.unwrap();
        serde_json::from_slice(&to_bytes(resp.into_body(), 1 << 20).await.unwrap()).unwrap()
    };
    assert_eq!(status.version, "v1");
    assert_eq!(status.tip_height, Some(71));
    assert_eq!(status.head_height, Some(0));
    assert_eq!(status.stats.headers_accepted, 72);
    assert_eq!(status.stats.exchanges, 2);
    assert_eq!(status.tip_hash, client.tip_hash().map(|h| h.to_string()));
}

#[tokio::test]
async fn malformed_fields_do_not_break_the_app() {
    let state = Arc::new(ServerState::new(HeaderWindow::new(2016), GossipConfig::default()));
    let req = Request::get("/").header("X-Gossip-Adv", "nonsense").body(Body::empty()).unwrap();
    let (status, headers, body) = raw(with_gossip(app(), state), req).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"hello");
    assert!(headers.iter().all(|(n, _)| !is_gossip_field(n)));
}
