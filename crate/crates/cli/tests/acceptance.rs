//! One pass/fail line per acceptance criterion.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sentinel_core::alerts::{
    alert_thresholds, attacker_escape_monte_carlo, attacker_escape_probability, prob_at_most_n_blocks,
    type2_thresholds, AlertLevel, AttackerModel, BlockTimingModel, EscapeModel,
};
use sentinel_core::chainview::{find_strongest_chain, index_from, Strongest};
use sentinel_core::gossip::{
    armored_len, decode_http_body_transport, decode_http_header_transport, encode_http_body_transport,
    encode_http_header_transport, GossipMessage, GossipPayload,
};
use sentinel_core::headers::{BlockHash, BlockHeader, CompactChainSegment};
use sentinel_core::metrics::{aadt, coverage, freshness, freshness_ci, Connection, ConnectionTrace};
use sentinel_core::sim::chain::{ChainBuilder, EASY_BITS};
use sentinel_core::sim::{run_batch, summarize, ScenarioConfig};
use sentinel_core::HeaderWindow;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1 -------------------------------------------------------------------------

const ALERT_TABLE: &str = include_str!("../data/alerts12mins.csv");
const ATTACK_TABLE: &str = include_str!("../data/attack_probs.csv");

fn probability_table() -> Outcome {
    let start = Instant::now();
    let model = BlockTimingModel::default();
    let (mut cells, mut bad) = (0, Vec::new());
    for line in ALERT_TABLE.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (t, n): (f64, u32) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        let p = prob_at_most_n_blocks(n, t, &model);
        let value_ok = if f[2] == "approx1" {
            p > 0.995
        } else {
            format!("{p:.1e}").parse::<f64>().unwrap() == f[2].parse::<f64>().unwrap()
        };
        let class_ok = AlertLevel::from_probability(p).to_string() == f[3];
        if !(value_ok && class_ok) {
            bad.push(format!("t={t} n={n}"));
        }
        cells += 1;
    }
    let elapsed = start.elapsed();
    check(
        bad.is_empty() && cells == 140 && elapsed < Duration::from_secs(1),
        format!("{} of {cells} cells match at 2 s.f. and class in {elapsed:.2?} {bad:?}", cells - bad.len()),
    )
}

// 2 -------------------------------------------------------------------------

fn thresholds() -> Outcome {
    let model = BlockTimingModel::default();
    let t1 = alert_thresholds(1, &model);
    let got = [t1.yellow, t1.orange, t1.red];
    let analytic = [1e-2f64, 1e-4, 1e-6].map(|p| -12.0 * p.ln());
    let published1 = [55.0, 110.0, 165.0];
    let k1_ok = (0..3).all(|i| (got[i] - analytic[i]).abs() <= 0.1 && (got[i] - published1[i]).abs() <= 3.0);

    let t7 = alert_thresholds(7, &model);
    let w7 = [t7.yellow, t7.orange, t7.red];
    let probs = [1e-2, 1e-4, 1e-6];
    let consistent = (0..3).all(|i| (prob_at_most_n_blocks(6, w7[i], &model) - probs[i]).abs() < 1e-9);
    let t2 = type2_thresholds(6, &model);
    let w2 = [t2.yellow, t2.orange, t2.red];
    let t2_consistent = (0..3).all(|i| (prob_at_most_n_blocks(7, w2[i], &model) - probs[i]).abs() < 1e-9);
    let published7 = [190.0, 275.0, 350.0];
    let dev7 = (0..3).map(|i| (w7[i] - published7[i]).abs()).fold(0.0, f64::max);
    let dev2 = (0..3).map(|i| (w2[i] - published7[i]).abs()).fold(0.0, f64::max);
    check(
        k1_ok && consistent && t2_consistent && dev2 <= 20.0,
        format!(
            "k=1 {:.2}/{:.2}/{:.2}; k=7 {:.1}/{:.1}/{:.1} (max deviation from published {dev7:.1}); type-2 k=6 window {:.1}/{:.1}/{:.1} (max deviation from published {dev2:.1})",
            got[0], got[1], got[2], w7[0], w7[1], w7[2], w2[0], w2[1], w2[2]
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn attacker_analysis() -> Outcome {
    let start = Instant::now();
    let model = BlockTimingModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_z: f64 = 0.0;
    for alpha in [0.05, 0.125, 0.2, 0.3, 0.5] {
        let a = AttackerModel::new(alpha).unwrap();
        for level in AlertLevel::ALARMS {
            let p = attacker_escape_probability(&a, level, 7, &model, EscapeModel::Tabulated);
            let mc = attacker_escape_monte_carlo(&a, level, 7, &model, EscapeModel::Tabulated, 1_000_000, &mut rng);
            let se = (p * (1.0 - p) / mc.trials as f64).sqrt();
            worst_z = worst_z.max((mc.probability - p).abs() / se);
        }
    }
    let mut worst_ratio: f64 = 1.0;
    for line in ATTACK_TABLE.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let a = AttackerModel::new(f[0]).unwrap();
        for (level, published) in AlertLevel::ALARMS.into_iter().zip(&f[1..]) {
            let ours = attacker_escape_probability(&a, level, 7, &model, EscapeModel::Tabulated);
            worst_ratio = worst_ratio.max(ours / published).max(published / ours);
        }
    }
    let elapsed = start.elapsed();
    check(
        worst_z < 3.0 && worst_ratio <= 3.0 && elapsed < Duration::from_secs(30),
        format!("max |MC - analytic| {worst_z:.2} SE over 15 cells at 1e6 trials; max ratio to published table {worst_ratio:.3}; {elapsed:.1?}"),
    )
}

// 4 -------------------------------------------------------------------------

fn target(bits: u32) -> BigUint {
    let exp = bits >> 24;
    let mant = BigUint::from(bits & 0x007f_ffff);
    if exp >= 3 {
        mant << (8 * (exp - 3))
    } else {
        mant >> (8 * (3 - exp))
    }
}

fn random_view(rng: &mut ChaCha8Rng, n: usize, share: Option<&[u32]>) -> Vec<BlockHeader> {
    (0..n)
        .map(|i| BlockHeader {
            version: 1,
            prev_hash: BlockHash(rng.random()),
            merkle_root: [0; 32],
            timestamp: i as u32,
            bits: match share {
                Some(b) if rng.random_bool(0.5) => b[i],
                _ => (rng.random_range(0x17..=0x20u32) << 24) | rng.random_range(0x0001_0000..=0x007f_ffffu32),
            },
            nonce: 0,
        })
        .collect()
}

fn strongest_chain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut mismatches, mut ties) = (0, 0);
    for case in 0..10_000 {
        let n = rng.random_range(1..=64);
        let c = random_view(&mut rng, n, None);
        let bits: Vec<u32> = c.iter().map(|h| h.bits).collect();
        let s = if case % 10 == 0 { c.iter().map(|h| BlockHeader { nonce: 1, ..*h }).collect() } else { random_view(&mut rng, n, Some(&bits)) };
        let (ci, si) = (index_from(500, &c), index_from(500, &s));
        let cw: BigUint = c.iter().map(|h| target(h.bits)).sum();
        let sw: BigUint = s.iter().map(|h| target(h.bits)).sum();
        let want = match cw.cmp(&sw) {
            std::cmp::Ordering::Less => Strongest::ClientStronger,
            std::cmp::Ordering::Greater => Strongest::ServerStronger,
            std::cmp::Ordering::Equal => Strongest::Tie,
        };
        let got = find_strongest_chain(&ci, &si).unwrap();
        let back = find_strongest_chain(&si, &ci).unwrap();
        if got != want || back != got.flip() {
            mismatches += 1;
        }
        ties += usize::from(got == Strongest::Tie);
    }
    check(mismatches == 0, format!("10000 pairs, {mismatches} disagreements with big-integer sums, {ties} ties, antisymmetry checked"))
}

// 5 -------------------------------------------------------------------------

fn random_header(rng: &mut ChaCha8Rng) -> BlockHeader {
    BlockHeader {
        version: rng.random(),
        prev_hash: BlockHash(rng.random()),
        merkle_root: rng.random(),
        timestamp: rng.random(),
        bits: rng.random(),
        nonce: rng.random(),
    }
}

fn codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    let mut exceptions = 0;
    for case in 0..100_000 {
        let h = random_header(&mut rng);
        if BlockHeader::decode(&h.encode()).ok() != Some(h) {
            failures += 1;
        }
        if case % 10 != 0 {
            continue;
        }
        let n = rng.random_range(1..24);
        let mut chain = vec![random_header(&mut rng)];
        for i in 1..n {
            let prev = chain[i - 1];
            let mut next = BlockHeader { prev_hash: prev.block_hash(), ..random_header(&mut rng) };
            next.version = if rng.random_bool(0.2) { rng.random() } else { prev.version };
            next.bits = if rng.random_bool(0.2) { rng.random() } else { prev.bits };
            chain.push(next);
        }
        let seg = CompactChainSegment::compress(&chain).unwrap();
        exceptions += seg.exceptions.len();
        let back = CompactChainSegment::decode(&seg.encode(), chain.len()).and_then(|s| s.expand());
        if back.ok() != Some(chain) {
            failures += 1;
        }
    }
    let full = ChainBuilder::new(EASY_BITS).extend(2016, 600);
    let bytes = CompactChainSegment::compress(&full).unwrap().encode();
    let records = bytes.len() - 2;
    check(
        failures == 0 && records == 80 + 40 * 2015,
        format!(
            "100000 wire + 10000 compact cases ({exceptions} version/bits exceptions), {failures} failures; 2016 headers: {records} record bytes (+2 count) vs {} raw",
            2016 * 80
        ),
    )
}

// 6 -------------------------------------------------------------------------

fn transport_budget() -> Outcome {
    let chain = ChainBuilder::new(EASY_BITS).extend(72, 600);
    let payload = GossipPayload::from_run(&index_from(1000, &chain)).unwrap();
    let msg = GossipMessage { advertised: Some(payload.range), requested: None, payload: Some(payload.clone()) };
    let armored = armored_len(payload.segment.encode().len());
    let fields = encode_http_header_transport(&msg, 64 * 1024).unwrap();
    let field_bytes: usize = fields.iter().map(|(n, v)| n.len() + v.len()).sum();
    let via_headers = decode_http_header_transport(fields.iter().map(|(n, v)| (n.as_str(), v.as_str()))).unwrap();
    let (_, body) = encode_http_body_transport(&msg);
    let via_body = decode_http_body_transport(&body).unwrap();
    check(
        armored <= 4096 && via_headers.as_ref() == Some(&msg) && via_body == msg,
        format!("72 headers armored to {armored} chars ({field_bytes} bytes of fields); both transports bit-exact"),
    )
}

// 7 -------------------------------------------------------------------------

fn timestamp_only() -> ScenarioConfig {
    ScenarioConfig {
        n_users: 1,
        connections_per_active_hour: 0.0,
        gossip_enabled: false,
        stop_when_decided: true,
        record_events: false,
        ..Default::default()
    }
}

fn sim_timestamp_path(median_out: &mut f64) -> Outcome {
    let s = summarize(&run_batch(&timestamp_only(), 1000, 4).unwrap());
    let median = s.median_type1_yellow_minutes.unwrap_or(f64::NAN);
    *median_out = median;
    let cfg = ScenarioConfig {
        attacker_alpha: 0.2,
        honest_mean_block_minutes: 12.0,
        duration_hours: 48.0,
        seed: 7_000_000,
        ..timestamp_only()
    };
    let e = summarize(&run_batch(&cfg, 20_000, 4).unwrap());
    let p = e.escape_rate.unwrap_or(f64::NAN);
    let expected = 1.68e-2;
    let se = (expected * (1.0 - expected) / e.escape_decided as f64).sqrt();
    check(
        (median - 55.0).abs() <= 5.5 && (p - expected).abs() <= 3.0 * se,
        format!(
            "median first yellow {median:.2} min over 1000 runs; escape from yellow {p:.5} vs 0.0168 (3 SE = {:.5}, {} decided)",
            3.0 * se,
            e.escape_decided
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn sim_gossip_path(timestamp_median: f64) -> Outcome {
    let base = ScenarioConfig {
        alerts_enabled: false,
        n_users: 20,
        n_eclipsed: 3,
        record_events: false,
        ..Default::default()
    };
    let mut checked = 0;
    let mut violations = 0;
    let plain = run_batch(&ScenarioConfig { seed: 100, ..base.clone() }, 50, 4).unwrap();
    for r in &plain {
        for rep in &r.reports {
            if rep.first_stronger_contact_minutes.is_some() {
                checked += 1;
                if rep.gossip_detection_minutes != rep.first_stronger_contact_minutes {
                    violations += 1;
                }
            }
        }
    }
    let fed = ScenarioConfig { honest_fed_tiers: vec![1], stop_when_decided: true, seed: 500, ..base };
    let s = summarize(&run_batch(&fed, 100, 4).unwrap());
    let mean = s.mean_detection_minutes.unwrap_or(f64::INFINITY);
    check(
        violations == 0 && checked > 0 && s.detected == s.eclipsed_users && mean < timestamp_median,
        format!(
            "{checked} users with a stronger contact, {violations} not detected at it; honest-fed tier 1: mean detection {mean:.1} min < timestamp median {timestamp_median:.1} min"
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn random_trace(rng: &mut ChaCha8Rng) -> ConnectionTrace {
    let span = rng.random_range(3_600..20_000i64);
    let recs = (0..rng.random_range(1..40))
        .map(|_| Connection {
            time: rng.random_range(0..=span),
            user: format!("u{}", rng.random_range(0..4)),
            server: format!("s{}", rng.random_range(0..4)),
        })
        .collect();
    ConnectionTrace::with_bounds(recs, 0, span).unwrap()
}

fn integrate(trace: &ConnectionTrace, times: &[i64], forward: bool) -> f64 {
    let mut total = 0.0;
    for s in trace.t0..trace.t_max {
        let t = s as f64 + 0.5;
        total += if forward {
            times.iter().map(|&c| c as f64).find(|&c| c >= t).unwrap_or(trace.t_max as f64) - t
        } else {
            t - times.iter().rev().map(|&c| c as f64).find(|&c| c <= t).unwrap_or(trace.t0 as f64)
        };
    }
    total / (trace.t_max - trace.t0) as f64 / 3600.0
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let rel = |a: f64, b: f64| if b == 0.0 { a.abs() } else { ((a - b) / b).abs() };
    for _ in 0..100 {
        let trace = random_trace(&mut rng);
        let servers: BTreeSet<String> = ["s0", "s1"].map(String::from).into();
        let user = trace.records()[0].user.clone();
        let times: Vec<i64> = trace.records().iter().filter(|c| c.user == user && servers.contains(&c.server)).map(|c| c.time).collect();
        worst = worst.max(rel(aadt(&trace, &user, &servers, None).unwrap(), integrate(&trace, &times, true)));
        let server = trace.records()[0].server.clone();
        let users: BTreeSet<String> = ["u0", "u2"].map(String::from).into();
        let times: Vec<i64> = trace.records().iter().filter(|c| c.server == server && users.contains(&c.user)).map(|c| c.time).collect();
        worst = worst.max(rel(freshness(&trace, &server, &users).unwrap(), integrate(&trace, &times, false)));
    }

    let t = 14_400;
    let quarter = ConnectionTrace::with_bounds(vec![Connection { time: t / 2, user: "u".into(), server: "s".into() }], 0, t).unwrap();
    let one: BTreeSet<String> = ["s".to_string()].into();
    let q = aadt(&quarter, "u", &one, Some(Default::default())).unwrap();
    let quarter_ok = q == t as f64 / 4.0 / 3600.0;

    let trace = random_trace(&mut rng);
    let all: Vec<String> = trace.servers().into_iter().map(String::from).collect();
    let hw = freshness_ci(&trace, &all, 1.0, 8, &mut rng).unwrap().half_width;

    let mut monotone = true;
    for _ in 0..200 {
        let trace = random_trace(&mut rng);
        let all: Vec<String> = trace.servers().into_iter().map(String::from).collect();
        let small: BTreeSet<String> = all.iter().take(1).cloned().collect();
        let big: BTreeSet<String> = all.iter().cloned().collect();
        monotone &= coverage(&trace, &small).unwrap() <= coverage(&trace, &big).unwrap();
        for u in trace.users() {
            monotone &= aadt(&trace, u, &big, Some(Default::default())).unwrap()
                <= aadt(&trace, u, &small, Some(Default::default())).unwrap() + 1e-12;
        }
        let users: Vec<String> = trace.users().into_iter().map(String::from).collect();
        let few: BTreeSet<String> = users.iter().take(1).cloned().collect();
        let many: BTreeSet<String> = users.iter().cloned().collect();
        for s in trace.servers() {
            monotone &= freshness(&trace, s, &many).unwrap() <= freshness(&trace, s, &few).unwrap() + 1e-12;
        }
    }
    check(
        worst <= 1e-6 && quarter_ok && hw == 0.0 && monotone,
        format!("max relative error {worst:.1e} over 100 traces; T/4 fixture {q} h; p_u=1 half width {hw}; monotonicity {monotone}"),
    )
}

// 10 ------------------------------------------------------------------------

async fn raw_response(router: axum::Router, req: http::Request<axum::body::Body>) -> (u16, Vec<(String, Vec<u8>)>, Vec<u8>) {
    use http_body_util::BodyExt;
    use tower::ServiceExt;
    let resp = router.oneshot(req).await.unwrap();
    let status = resp.status().as_u16();
    let headers = resp.headers().iter().map(|(n, v)| (n.to_string(), v.as_bytes().to_vec())).collect();
    (status, headers, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn service_end_to_end() -> Outcome {
    use axum::body::Body;
    use axum::routing::{get, post};
    use sentinel_service::{run_client_daemon, serve, with_gossip, ClientDaemonConfig, DaemonAlert, ServeConfig, ServerState};
    use std::sync::Arc;

    let start = Instant::now();
    let app = || {
        axum::Router::new()
            .route("/", get(|| async { "hello" }))
            .route("/echo", post(|b: String| async move { ([("x-app", "1")], b) }))
    };
    let requests = || {
        vec![
            http::Request::get("/").body(Body::empty()).unwrap(),
            http::Request::post("/echo").body(Body::from("some bytes")).unwrap(),
            http::Request::get("/absent").body(Body::empty()).unwrap(),
        ]
    };
    let state = Arc::new(ServerState::new(HeaderWindow::new(2016), Default::default()));
    let mut identical = true;
    for (a, b) in requests().into_iter().zip(requests()) {
        identical &= raw_response(app(), a).await == raw_response(with_gossip(app(), state.clone()), b).await;
    }

    let chain = ChainBuilder::new(EASY_BITS).extend(40, 600);
    let server = serve(ServeConfig { listen: ([127, 0, 0, 1], 0).into(), ..Default::default() }, None).await.unwrap();
    let url = format!("http://{}/", server.addr);
    let honest = run_client_daemon(ClientDaemonConfig::default(), Some(HeaderWindow::from_headers(2016, 0, &chain).unwrap())).unwrap();
    let victim = run_client_daemon(ClientDaemonConfig::default(), Some(HeaderWindow::from_headers(2016, 0, &chain[..30]).unwrap())).unwrap();
    for _ in 0..2 {
        honest.proxy(http::Request::get(&url).body(bytes::Bytes::new()).unwrap()).await.unwrap();
    }
    victim.proxy(http::Request::get(&url).body(bytes::Bytes::new()).unwrap()).await.unwrap();
    let alerted = victim.alerts().iter().any(|a| matches!(a, DaemonAlert::Eclipse { .. }));
    server.shutdown().await.unwrap();
    let elapsed = start.elapsed();
    check(
        identical && alerted && elapsed < Duration::from_secs(10),
        format!("passthrough byte-identical {identical}; eclipsed client alerted after one exchange {alerted}; {elapsed:.2?}"),
    )
}

fn main() {
    let mut median = f64::NAN;
    let rt = tokio::runtime::Runtime::new().unwrap();
    let results: Vec<(u32, &str, Outcome)> = vec![
        (1, "probability table", probability_table()),
        (2, "thresholds", thresholds()),
        (3, "attacker analysis", attacker_analysis()),
        (4, "strongest-chain equivalence", strongest_chain()),
        (5, "codec properties", codec()),
        (6, "transport budget", transport_budget()),
        (7, "simulation, timestamp path", sim_timestamp_path(&mut median)),
        (8, "simulation, gossip path", sim_gossip_path(median)),
        (9, "metrics oracles", metrics()),
        (10, "service end to end", rt.block_on(service_end_to_end())),
    ];
    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
