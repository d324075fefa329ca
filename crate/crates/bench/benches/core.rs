use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sentinel_core::alerts::{alert_thresholds, BlockTimingModel};
use sentinel_core::chainview::{find_strongest_chain, index_from};
use sentinel_core::gossip::{GossipMessage, GossipPayload};
use sentinel_core::headers::CompactChainSegment;
use sentinel_core::sim::chain::{ChainBuilder, EASY_BITS};
use sentinel_core::sim::{run_scenario, ScenarioConfig};

fn codec(c: &mut Criterion) {
    let chain = ChainBuilder::new(EASY_BITS).extend(2016, 600);
    let seg = CompactChainSegment::compress(&chain).unwrap();
    let bytes = seg.encode();
    c.bench_function("compress_2016", |b| b.iter(|| CompactChainSegment::compress(black_box(&chain)).unwrap()));
    c.bench_function("decode_expand_2016", |b| {
        b.iter(|| CompactChainSegment::decode(black_box(&bytes), 2016).and_then(|s| s.expand()).unwrap())
    });
}

fn strongest(c: &mut Criterion) {
    let chain = ChainBuilder::new(EASY_BITS).extend(2016, 600);
    let fork = ChainBuilder::new(EASY_BITS).with_tag(1).extend(2016, 600);
    let a = index_from(0, &chain);
    let b2 = index_from(0, &fork);
    c.bench_function("find_strongest_2016", |b| b.iter(|| find_strongest_chain(black_box(&a), black_box(&b2)).unwrap()));
}

fn exchange(c: &mut Criterion) {
    let chain = ChainBuilder::new(EASY_BITS).extend(72, 600);
    let payload = GossipPayload::from_run(&index_from(0, &chain)).unwrap();
    let msg = GossipMessage { advertised: Some(payload.range), requested: None, payload: Some(payload) };
    c.bench_function("http_body_roundtrip_72", |b| {
        b.iter(|| {
            let (_, body) = sentinel_core::gossip::encode_http_body_transport(black_box(&msg));
            sentinel_core::gossip::decode_http_body_transport(&body).unwrap()
        })
    });
}

fn thresholds(c: &mut Criterion) {
    let model = BlockTimingModel::default();
    c.bench_function("alert_thresholds_k7", |b| b.iter(|| alert_thresholds(black_box(7), &model)));
}

fn sim(c: &mut Criterion) {
    let cfg = ScenarioConfig { record_events: false, ..Default::default() };
    let mut group = c.benchmark_group("sim");
    group.sample_size(10);
    group.bench_function("default_scenario", |b| b.iter(|| run_scenario(black_box(&cfg)).unwrap()));
    group.finish();
}

criterion_group!(benches, codec, strongest, exchange, thresholds, sim);
criterion_main!(benches);
