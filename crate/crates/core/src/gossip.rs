//! Header gossip between light clients and passive servers.
//!
//! One exchange has three legs: the client advertises the heights it holds
//! and asks for a suffix, the server answers with that suffix plus a request
//! of its own, and the client answers the request. In passive mode the third
//! leg rides on the next ordinary request; in active mode it is sent at once.
//!
//! Two transports carry a [`GossipMessage`]: `X-Gossip-*` HTTP header fields
//! (base64, split into 1 KiB continuation fields) and a raw binary body.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chainview::{index_from, resolve, run_range, HeaderRange, HeaderWindow, IndexedHeader, Resolution, Strongest};
use crate::headers::CompactChainSegment;

pub const FIELD_ADV: &str = "X-Gossip-Adv";
pub const FIELD_REQ: &str = "X-Gossip-Req";
pub const FIELD_RANGE: &str = "X-Gossip-Range";
pub const FIELD_DATA_PREFIX: &str = "X-Gossip-Data-";
/// Value of `X-Gossip-Adv` for a sender holding no headers.
pub const EMPTY_RANGE: &str = "empty";
/// Maximum characters per `X-Gossip-Data-n` field.
pub const DATA_CHUNK_CHARS: usize = 1024;

pub const BODY_MAGIC: &[u8; 8] = b"SNTLGSP1";
pub const BODY_CONTENT_TYPE: &str = "application/x-sentinel-gossip";

const FLAG_ADV: u8 = 1;
const FLAG_REQ: u8 = 2;
const FLAG_PAYLOAD: u8 = 4;

/// Request sent by a client that holds nothing: everything the server has.
pub const FULL_RANGE: HeaderRange = HeaderRange { beg: 0, end: u64::MAX };

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GossipError {
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("malformed gossip field {field}: {reason}")]
    MalformedField { field: String, reason: String },
    #[error("gossip fields need {size} bytes, budget is {budget}")]
    TooLarge { size: usize, budget: usize },
    #[error("malformed gossip body: {0}")]
    MalformedBody(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GossipConfig {
    /// Heights below the tip re-sent for comparison.
    pub lookback: u64,
    /// Heights above the tip asked for.
    pub growth: u64,
    /// Cap on headers carried by one message.
    pub max_payload_headers: usize,
    /// Byte budget for all gossip header fields of one message.
    pub header_budget_bytes: usize,
    /// Remote tip this many blocks ahead of a non-empty local view counts as
    /// a detection even without a fork. Zero disables the rule.
    pub lag_alert_blocks: u64,
}

impl Default for GossipConfig {
    fn default() -> Self {
        GossipConfig {
            lookback: 72,
            growth: 12,
            max_payload_headers: 144,
            header_budget_bytes: 64 * 1024,
            lag_alert_blocks: 1,
        }
    }
}

/// A compact segment together with the heights it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GossipPayload {
    pub range: HeaderRange,
    pub segment: CompactChainSegment,
}

impl GossipPayload {
    /// Packs a consecutive run; `None` for an empty run.
    pub fn from_run(run: &[IndexedHeader]) -> Option<Self> {
        let range = run_range(run)?;
        let headers: Vec<_> = run.iter().map(|ih| ih.header).collect();
        let segment = CompactChainSegment::compress(&headers).ok()?;
        Some(GossipPayload { range, segment })
    }

    pub fn headers(&self) -> Result<Vec<IndexedHeader>, GossipError> {
        let headers = self.segment.expand().map_err(|e| GossipError::InvalidPayload(e.to_string()))?;
        if headers.len() as u64 != self.range.len() {
            return Err(GossipError::InvalidPayload(format!(
                "range {} announces {} headers, segment holds {}",
                self.range,
                self.range.len(),
                headers.len()
            )));
        }
        Ok(index_from(self.range.beg, &headers))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GossipMessage {
    /// Heights the sender holds; `None` when it holds nothing.
    pub advertised: Option<HeaderRange>,
    /// Heights the sender wants from its peer.
    pub requested: Option<HeaderRange>,
    pub payload: Option<GossipPayload>,
}

impl GossipMessage {
    pub fn payload_range(&self) -> Option<HeaderRange> {
        self.payload.as_ref().map(|p| p.range)
    }
}

fn newest(mut run: Vec<IndexedHeader>, max: usize) -> Vec<IndexedHeader> {
    if run.len() > max {
        run.drain(..run.len() - max);
    }
    run
}

fn lookback(w: &HeaderWindow, cfg: &GossipConfig) -> u64 {
    cfg.lookback.min(w.capacity() as u64 / 2).max(1)
}

/// First leg: advertise holdings, ask for the suffix around the tip.
pub fn client_initiate(w: &HeaderWindow, cfg: &GossipConfig) -> GossipMessage {
    let requested = match w.tail_height() {
        None => FULL_RANGE,
        Some(tail) => HeaderRange {
            beg: (tail + 1).saturating_sub(lookback(w, cfg)),
            end: tail.saturating_add(1 + cfg.growth),
        },
    };
    GossipMessage { advertised: w.range(), requested: Some(requested), payload: None }
}

/// Heights of a peer's advertisement worth fetching: anything above our tip
/// plus a lookback for fork comparison.
fn wanted_from_peer(w: &HeaderWindow, advertised: HeaderRange, cfg: &GossipConfig) -> Option<HeaderRange> {
    match w.tail_height() {
        None => Some(advertised),
        Some(tail) if advertised.end > tail => Some(HeaderRange {
            beg: advertised.beg.max((tail + 1).saturating_sub(lookback(w, cfg))),
            end: advertised.end,
        }),
        _ => None,
    }
}

fn payload_over(w: &HeaderWindow, range: &HeaderRange, cfg: &GossipConfig) -> Option<GossipPayload> {
    GossipPayload::from_run(&newest(w.slice(range), cfg.max_payload_headers))
}

fn apply_payload(w: &HeaderWindow, payload: &GossipPayload) -> Result<Resolution, GossipError> {
    let run = payload.headers()?;
    resolve(w, &run).map_err(|e| GossipError::InvalidPayload(e.to_string()))
}

/// What a server produced for one incoming message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerResponse {
    pub reply: GossipMessage,
    pub window: HeaderWindow,
    pub resolution: Option<Resolution>,
    /// Set when the incoming payload was rejected; the reply is still valid.
    pub error: Option<GossipError>,
}

/// Server side of any leg: merge a carried payload, then answer the request.
pub fn server_respond(w_s: &HeaderWindow, msg: &GossipMessage, cfg: &GossipConfig) -> ServerResponse {
    let mut window = w_s.clone();
    let mut resolution = None;
    let mut error = None;
    if let Some(p) = &msg.payload {
        match apply_payload(w_s, p) {
            Ok(res) => {
                window = res.window.clone();
                resolution = Some(res);
            }
            Err(e) => {
                tracing::debug!(error = %e, "client payload rejected");
                error = Some(e);
            }
        }
    }
    let payload = msg.requested.and_then(|r| payload_over(&window, &r, cfg));
    let requested = msg.advertised.and_then(|adv| wanted_from_peer(&window, adv, cfg));
    let reply = GossipMessage { advertised: window.range(), requested, payload };
    ServerResponse { reply, window, resolution, error }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExchangeResult {
    Tie,
    LocalStronger,
    RemoteStronger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeOutcome {
    pub result: ExchangeResult,
    pub fork_height: Option<u64>,
    pub headers_learned: usize,
    /// How far the remote tip was ahead of a non-empty local tip.
    pub lag_blocks: u64,
    /// A verified stronger branch forks below the local tip.
    pub eclipse_suspected: bool,
    /// The remote payload failed validation and was ignored.
    pub remote_invalid: bool,
}

impl Default for ExchangeOutcome {
    fn default() -> Self {
        ExchangeOutcome {
            result: ExchangeResult::Tie,
            fork_height: None,
            headers_learned: 0,
            lag_blocks: 0,
            eclipse_suspected: false,
            remote_invalid: false,
        }
    }
}

impl ExchangeOutcome {
    fn from_resolution(old: &HeaderWindow, received: HeaderRange, res: &Resolution) -> Self {
        let old_tail = old.tail_height();
        let new_tail = res.window.tail_height();
        let result = match res.comparison.verdict {
            Strongest::ServerStronger => ExchangeResult::RemoteStronger,
            Strongest::ClientStronger => ExchangeResult::LocalStronger,
            Strongest::Tie if res.report.learned > 0 && new_tail > old_tail => ExchangeResult::RemoteStronger,
            Strongest::Tie if old_tail.is_some_and(|t| received.end < t) => ExchangeResult::LocalStronger,
            Strongest::Tie => ExchangeResult::Tie,
        };
        let remote = result == ExchangeResult::RemoteStronger;
        let lag_blocks = match (old_tail, new_tail) {
            (Some(o), Some(n)) if remote => n.saturating_sub(o),
            _ => 0,
        };
        let fork_height = res.comparison.fork_height;
        ExchangeOutcome {
            result,
            fork_height,
            headers_learned: res.report.learned,
            lag_blocks,
            eclipse_suspected: remote && fork_height.is_some_and(|f| old_tail.is_some_and(|t| f <= t)),
            remote_invalid: false,
        }
    }

    /// Whether this exchange should raise an eclipse alert.
    pub fn detects(&self, cfg: &GossipConfig) -> bool {
        self.eclipse_suspected || (cfg.lag_alert_blocks > 0 && self.lag_blocks >= cfg.lag_alert_blocks)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientFulfillment {
    pub follow_up: Option<GossipMessage>,
    pub outcome: ExchangeOutcome,
    pub window: HeaderWindow,
    pub error: Option<GossipError>,
}

/// Client side of the second leg: adopt the stronger view, then prepare the
/// headers the server asked for.
pub fn client_fulfill(w: &HeaderWindow, reply: &GossipMessage, cfg: &GossipConfig) -> ClientFulfillment {
    let mut window = w.clone();
    let mut outcome = ExchangeOutcome::default();
    let mut error = None;
    if let Some(p) = &reply.payload {
        match apply_payload(w, p) {
            Ok(res) => {
                outcome = ExchangeOutcome::from_resolution(w, p.range, &res);
                window = res.window;
            }
            Err(e) => {
                tracing::debug!(error = %e, "server payload rejected");
                outcome.remote_invalid = true;
                error = Some(e);
            }
        }
    }
    let follow_up = reply.requested.and_then(|r| payload_over(&window, &r, cfg)).map(|payload| GossipMessage {
        advertised: window.range(),
        requested: None,
        payload: Some(payload),
    });
    ClientFulfillment { follow_up, outcome, window, error }
}

fn format_range(r: &HeaderRange) -> String {
    r.to_string()
}

fn parse_range(field: &str, value: &str) -> Result<HeaderRange, GossipError> {
    let bad = |reason: &str| GossipError::MalformedField { field: field.to_string(), reason: reason.to_string() };
    let (a, b) = value.trim().split_once('-').ok_or_else(|| bad("expected beg-end"))?;
    let beg = a.parse().map_err(|_| bad("bad start height"))?;
    let end = b.parse().map_err(|_| bad("bad end height"))?;
    HeaderRange::new(beg, end).ok_or_else(|| bad("start above end"))
}

/// Characters of the base64 armoring of `raw_len` bytes.
pub fn armored_len(raw_len: usize) -> usize {
    raw_len.div_ceil(3) * 4
}

fn fields_size(fields: &[(String, String)]) -> usize {
    // "Name: value\r\n"
    fields.iter().map(|(n, v)| n.len() + v.len() + 4).sum()
}

pub fn is_gossip_field(name: &str) -> bool {
    name.len() >= 9 && name[..9].eq_ignore_ascii_case("x-gossip-")
}

/// Encodes a message as HTTP header fields, failing with `TooLarge` when they
/// exceed `budget_bytes`.
pub fn encode_http_header_transport(msg: &GossipMessage, budget_bytes: usize) -> Result<Vec<(String, String)>, GossipError> {
    let mut fields = vec![(
        FIELD_ADV.to_string(),
        msg.advertised.as_ref().map_or_else(|| EMPTY_RANGE.to_string(), format_range),
    )];
    if let Some(r) = &msg.requested {
        fields.push((FIELD_REQ.to_string(), format_range(r)));
    }
    if let Some(p) = &msg.payload {
        fields.push((FIELD_RANGE.to_string(), format_range(&p.range)));
        let armored = BASE64.encode(p.segment.encode());
        for (i, chunk) in armored.as_bytes().chunks(DATA_CHUNK_CHARS).enumerate() {
            let chunk = std::str::from_utf8(chunk).expect("base64 is ascii");
            fields.push((format!("{FIELD_DATA_PREFIX}{}", i + 1), chunk.to_string()));
        }
    }
    let size = fields_size(&fields);
    if size > budget_bytes {
        return Err(GossipError::TooLarge { size, budget: budget_bytes });
    }
    Ok(fields)
}

/// Decodes gossip fields from a header map. Returns `None` when the fields
/// carry no advertisement, i.e. the peer does not speak the protocol.
pub fn decode_http_header_transport<'a, I>(fields: I) -> Result<Option<GossipMessage>, GossipError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut adv = None;
    let mut req = None;
    let mut range = None;
    let mut data: BTreeMap<usize, &str> = BTreeMap::new();
    for (name, value) in fields {
        if !is_gossip_field(name) {
            continue;
        }
        if name.eq_ignore_ascii_case(FIELD_ADV) {
            adv = Some(value);
        } else if name.eq_ignore_ascii_case(FIELD_REQ) {
            req = Some(parse_range(FIELD_REQ, value)?);
        } else if name.eq_ignore_ascii_case(FIELD_RANGE) {
            range = Some(parse_range(FIELD_RANGE, value)?);
        } else if name.len() > FIELD_DATA_PREFIX.len() && name[..FIELD_DATA_PREFIX.len()].eq_ignore_ascii_case(FIELD_DATA_PREFIX) {
            let idx: usize = name[FIELD_DATA_PREFIX.len()..].parse().map_err(|_| GossipError::MalformedField {
                field: name.to_string(),
                reason: "bad continuation index".into(),
            })?;
            if data.insert(idx, value).is_some() {
                return Err(GossipError::MalformedField { field: name.to_string(), reason: "duplicate field".into() });
            }
        }
    }
    let Some(adv) = adv else { return Ok(None) };
    let advertised = if adv.trim() == EMPTY_RANGE { None } else { Some(parse_range(FIELD_ADV, adv)?) };
    let payload = match (range, data.is_empty()) {
        (None, true) => None,
        (None, false) => {
            return Err(GossipError::MalformedField { field: FIELD_RANGE.into(), reason: "data without range".into() })
        }
        (Some(_), true) => {
            return Err(GossipError::MalformedField { field: FIELD_RANGE.into(), reason: "range without data".into() })
        }
        (Some(range), false) => {
            if data.keys().copied().ne(1..=data.len()) {
                return Err(GossipError::MalformedField {
                    field: FIELD_DATA_PREFIX.into(),
                    reason: "continuation fields not numbered 1..n".into(),
                });
            }
            let armored: String = data.values().map(|v| v.trim()).collect();
            let raw = BASE64.decode(armored.as_bytes()).map_err(|e| GossipError::MalformedField {
                field: FIELD_DATA_PREFIX.into(),
                reason: e.to_string(),
            })?;
            let count = usize::try_from(range.len()).map_err(|_| GossipError::InvalidPayload("range too long".into()))?;
            let segment =
                CompactChainSegment::decode(&raw, count).map_err(|e| GossipError::InvalidPayload(e.to_string()))?;
            Some(GossipPayload { range, segment })
        }
    };
    Ok(Some(GossipMessage { advertised, requested: req, payload }))
}

/// Newest suffix of `run` whose header-transport encoding fits the budget.
pub fn fit_to_budget(run: &[IndexedHeader], budget_bytes: usize) -> Vec<IndexedHeader> {
    let fits = |n: usize| {
        let msg = GossipMessage { payload: GossipPayload::from_run(&run[run.len() - n..]), ..Default::default() };
        encode_http_header_transport(&msg, budget_bytes).is_ok()
    };
    let (mut lo, mut hi) = (0usize, run.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    run[run.len() - lo..].to_vec()
}

/// Binary body: magic, flags byte, the present ranges as little-endian u64
/// pairs (advertised, requested, payload), then a u32 segment length and the
/// raw compact segment.
pub fn encode_http_body_transport(msg: &GossipMessage) -> (&'static str, Vec<u8>) {
    let mut out = Vec::with_capacity(64 + msg.payload.as_ref().map_or(0, |p| p.segment.encoded_len()));
    out.extend_from_slice(BODY_MAGIC);
    let flags = u8::from(msg.advertised.is_some()) * FLAG_ADV
        | u8::from(msg.requested.is_some()) * FLAG_REQ
        | u8::from(msg.payload.is_some()) * FLAG_PAYLOAD;
    out.push(flags);
    let mut put = |r: &HeaderRange| {
        out.extend_from_slice(&r.beg.to_le_bytes());
        out.extend_from_slice(&r.end.to_le_bytes());
    };
    if let Some(r) = &msg.advertised {
        put(r);
    }
    if let Some(r) = &msg.requested {
        put(r);
    }
    if let Some(p) = &msg.payload {
        put(&p.range);
        let seg = p.segment.encode();
        out.extend_from_slice(&(seg.len() as u32).to_le_bytes());
        out.extend_from_slice(&seg);
    }
    (BODY_CONTENT_TYPE, out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GossipError> {
        if self.bytes.len() < n {
            return Err(GossipError::MalformedBody(format!("truncated: need {n} bytes, have {}", self.bytes.len())));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, GossipError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn range(&mut self) -> Result<HeaderRange, GossipError> {
        let (beg, end) = (self.u64()?, self.u64()?);
        HeaderRange::new(beg, end).ok_or_else(|| GossipError::MalformedBody(format!("inverted range {beg}-{end}")))
    }
}

pub fn decode_http_body_transport(body: &[u8]) -> Result<GossipMessage, GossipError> {
    let mut r = Reader { bytes: body };
    if r.take(8)? != BODY_MAGIC {
        return Err(GossipError::MalformedBody("bad magic".into()));
    }
    let flags = r.take(1)?[0];
    if flags & !(FLAG_ADV | FLAG_REQ | FLAG_PAYLOAD) != 0 {
        return Err(GossipError::MalformedBody(format!("unknown flags {flags:#04x}")));
    }
    let advertised = if flags & FLAG_ADV != 0 { Some(r.range()?) } else { None };
    let requested = if flags & FLAG_REQ != 0 { Some(r.range()?) } else { None };
    let payload = if flags & FLAG_PAYLOAD != 0 {
        let range = r.range()?;
        let len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let raw = r.take(len)?;
        let count = usize::try_from(range.len()).map_err(|_| GossipError::MalformedBody("range too long".into()))?;
        let segment = CompactChainSegment::decode(raw, count).map_err(|e| GossipError::MalformedBody(e.to_string()))?;
        Some(GossipPayload { range, segment })
    } else {
        None
    };
    if !r.bytes.is_empty() {
        return Err(GossipError::MalformedBody(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(GossipMessage { advertised, requested, payload })
}

/// Servers known to run the protocol, with the last time each answered.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ServerDirectory {
    entries: BTreeMap<String, i64>,
}

impl ServerDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, address: &str, confirmed_at: i64) {
        self.entries.insert(address.to_string(), confirmed_at);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, address: &str) -> bool {
        self.entries.contains_key(address)
    }

    pub fn last_confirmed(&self, address: &str) -> Option<i64> {
        self.entries.get(address).copied()
    }

    pub fn addresses(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Inserts `address` or refreshes its confirmation time.
pub fn record_protocol_server(d: &ServerDirectory, address: &str, confirmed_at: i64) -> ServerDirectory {
    let mut d = d.clone();
    d.record(address, confirmed_at);
    d
}

/// Uniform sample without replacement of `min(sample_size, |d|)` addresses.
pub fn select_servers<R: Rng + ?Sized>(d: &ServerDirectory, sample_size: usize, rng: &mut R) -> Vec<String> {
    let all: Vec<&str> = d.addresses().collect();
    rand::seq::index::sample(rng, all.len(), sample_size.min(all.len()))
        .into_iter()
        .map(|i| all[i].to_string())
        .collect()
}

/// Carries one gossip message to a server and back. `Ok(None)` means the
/// server answered without gossip fields.
pub trait GossipTransport {
    fn exchange(&mut self, server: &str, msg: &GossipMessage) -> Result<Option<GossipMessage>, GossipError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PollReport {
    pub window: HeaderWindow,
    pub polled: Vec<String>,
    pub outcomes: Vec<(String, ExchangeOutcome)>,
    pub errors: Vec<(String, GossipError)>,
    pub non_protocol: Vec<String>,
    pub eclipse_suspected: bool,
}

/// Runs full exchanges against a random sample of known servers. Stops at the
/// first exchange that detects an eclipse.
pub fn active_poll<T: GossipTransport + ?Sized, R: Rng + ?Sized>(
    d: &ServerDirectory,
    w: &HeaderWindow,
    sample_size: usize,
    cfg: &GossipConfig,
    transport: &mut T,
    rng: &mut R,
) -> PollReport {
    let mut report = PollReport {
        window: w.clone(),
        polled: Vec::new(),
        outcomes: Vec::new(),
        errors: Vec::new(),
        non_protocol: Vec::new(),
        eclipse_suspected: false,
    };
    for server in select_servers(d, sample_size, rng) {
        report.polled.push(server.clone());
        let msg = client_initiate(&report.window, cfg);
        let reply = match transport.exchange(&server, &msg) {
            Ok(Some(reply)) => reply,
            Ok(None) => {
                report.non_protocol.push(server);
                continue;
            }
            Err(e) => {
                report.errors.push((server, e));
                continue;
            }
        };
        let f = client_fulfill(&report.window, &reply, cfg);
        report.window = f.window;
        if let Some(e) = f.error {
            report.errors.push((server.clone(), e));
        }
        if let Some(follow_up) = f.follow_up {
            if let Err(e) = transport.exchange(&server, &follow_up) {
                report.errors.push((server.clone(), e));
            }
        }
        let detected = f.outcome.detects(cfg);
        report.outcomes.push((server, f.outcome));
        if detected {
            report.eclipse_suspected = true;
            break;
        }
    }
    report
}
