use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentinel_core::metrics::{aadt, coverage, freshness, freshness_ci, Connection, ConnectionTrace};

fn random_trace(rng: &mut ChaCha8Rng) -> ConnectionTrace {
    let n = rng.random_range(1..40);
    let span = rng.random_range(3_600..20_000i64);
    let recs = (0..n)
        .map(|_| Connection {
            time: rng.random_range(0..=span),
            user: format!("u{}", rng.random_range(0..4)),
            server: format!("s{}", rng.random_range(0..4)),
        })
        .collect();
    ConnectionTrace::with_bounds(recs, 0, span).unwrap()
}

/// Midpoint rule at one-second steps; exact for integer breakpoints.
fn brute_aadt(trace: &ConnectionTrace, times: &[i64]) -> f64 {
    let mut total = 0.0;
    for s in trace.t0..trace.t_max {
        let t = s as f64 + 0.5;
        let next = times.iter().map(|&c| c as f64).find(|&c| c >= t).unwrap_or(trace.t_max as f64);
        total += next - t;
    }
    total / (trace.t_max - trace.t0) as f64 / 3600.0
}

fn brute_freshness(trace: &ConnectionTrace, times: &[i64]) -> f64 {
    let mut total = 0.0;
    for s in trace.t0..trace.t_max {
        let t = s as f64 + 0.5;
        let last = times.iter().rev().map(|&c| c as f64).find(|&c| c <= t).unwrap_or(trace.t0 as f64);
        total += t - last;
    }
    total / (trace.t_max - trace.t0) as f64 / 3600.0
}

#[test]
fn closed_form_matches_numeric_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let trace = random_trace(&mut rng);
        let servers: BTreeSet<String> = ["s0", "s2"].iter().map(|s| s.to_string()).collect();
        let user = trace.records()[0].user.clone();
        let times: Vec<i64> =
            trace.records().iter().filter(|c| c.user == user && servers.contains(&c.server)).map(|c| c.time).collect();
        let exact = aadt(&trace, &user, &servers, None).unwrap();
        let brute = brute_aadt(&trace, &times);
        assert!((exact - brute).abs() <= 1e-6 * brute.max(1e-12), "{exact} vs {brute}");

        let server = trace.records()[0].server.clone();
        let users: BTreeSet<String> = ["u0", "u1"].iter().map(|s| s.to_string()).collect();
        let times: Vec<i64> =
            trace.records().iter().filter(|c| c.server == server && users.contains(&c.user)).map(|c| c.time).collect();
        let exact = freshness(&trace, &server, &users).unwrap();
        let brute = brute_freshness(&trace, &times);
        assert!((exact - brute).abs() <= 1e-6 * brute.max(1e-12), "{exact} vs {brute}");
    }
}

#[test]
fn monotone_under_set_growth_and_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for _ in 0..200 {
        let trace = random_trace(&mut rng);
        let all: Vec<String> = trace.servers().into_iter().map(String::from).collect();
        let small: BTreeSet<String> = all.iter().take(1).cloned().collect();
        let big: BTreeSet<String> = all.iter().take(3).cloned().collect();
        assert!(coverage(&trace, &small).unwrap() <= coverage(&trace, &big).unwrap());
        let shifted = trace.translated(123_456);
        for u in trace.users() {
            let a = aadt(&trace, u, &small, Some(Default::default())).unwrap();
            let b = aadt(&trace, u, &big, Some(Default::default())).unwrap();
            assert!(b <= a + 1e-12);
            assert_eq!(a, aadt(&shifted, u, &small, Some(Default::default())).unwrap());
        }
        let users: Vec<String> = trace.users().into_iter().map(String::from).collect();
        let few: BTreeSet<String> = users.iter().take(1).cloned().collect();
        let many: BTreeSet<String> = users.iter().cloned().collect();
        for s in trace.servers() {
            assert!(freshness(&trace, s, &many).unwrap() <= freshness(&trace, s, &few).unwrap() + 1e-12);
        }
    }
}

#[test]
fn full_adoption_has_zero_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let trace = random_trace(&mut rng);
    let servers: Vec<String> = trace.servers().into_iter().map(String::from).collect();
    let e = freshness_ci(&trace, &servers, 1.0, 8, &mut rng).unwrap();
    assert_eq!(e.half_width, 0.0);
}
