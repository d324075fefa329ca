//! Eclipse scenarios in virtual time.
//!
//! Time runs in minutes from midnight of day zero. The honest network mines
//! at rate `(1 - alpha) / mean`; once the eclipse starts the attacker forks
//! at the honest tip and mines at `alpha / mean`. Eclipsed users only see the
//! attacker's branch and learn about the honest one through gossip.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::alerts::{AlertEngine, AlertLevel, AlertMonitor, AlertType, BlockTimingModel};
use crate::chainview::HeaderWindow;
use crate::gossip::{client_fulfill, client_initiate, server_respond, GossipConfig, GossipMessage, ServerDirectory};
use crate::headers::BlockHeader;
use crate::metrics::{Connection, ConnectionTrace, MetricsError, TIER_COUNT};
use crate::sim::chain::{ChainBuilder, EASY_BITS};
use crate::sim::traffic::{DiurnalProfile, ServerPopulation, DEFAULT_TIER_WEIGHTS};

/// Unix time of virtual minute zero.
pub const BASE_UNIX_TIME: i64 = 1_600_000_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
}

/// How the attacker stamps its blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestampMode {
    /// Real creation times.
    #[default]
    HonestClock,
    /// Paced at the honest mean after the fork block, never later than the
    /// real creation time, so the branch looks healthy on timestamps alone.
    Backdated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct ScenarioConfig {
    pub honest_mean_block_minutes: f64,
    /// Mean block interval assumed by the users' alert engine.
    pub detection_mean_block_minutes: f64,
    pub attacker_alpha: f64,
    pub attacker_timestamps: TimestampMode,
    pub eclipse_start_hours: f64,
    /// Start the eclipse right after the first honest block at or after
    /// `eclipse_start_hours`.
    pub align_eclipse_to_block: bool,
    pub n_users: usize,
    /// The first `n_eclipsed` users are eclipsed.
    pub n_eclipsed: usize,
    pub tier_sizes: [usize; TIER_COUNT],
    pub tier_weights: [f64; TIER_COUNT],
    /// Servers in these tiers always hold the honest chain.
    pub honest_fed_tiers: Vec<u8>,
    /// Probability that a server runs the protocol.
    pub protocol_fraction: f64,
    pub connections_per_active_hour: f64,
    pub diurnal_profile: DiurnalProfile,
    pub gossip_enabled: bool,
    pub alerts_enabled: bool,
    pub confirmations: usize,
    pub history_blocks: usize,
    pub window_capacity: usize,
    pub gossip: GossipConfig,
    pub duration_hours: f64,
    /// End the run once every eclipsed user is detected and, with an
    /// attacker, its escape check is settled.
    pub stop_when_decided: bool,
    pub record_events: bool,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            honest_mean_block_minutes: 10.0,
            detection_mean_block_minutes: 12.0,
            attacker_alpha: 0.0,
            attacker_timestamps: TimestampMode::HonestClock,
            eclipse_start_hours: 12.0,
            align_eclipse_to_block: true,
            n_users: 10,
            n_eclipsed: 1,
            tier_sizes: [1, 1, 2, 2, 2, 4],
            tier_weights: DEFAULT_TIER_WEIGHTS,
            honest_fed_tiers: Vec::new(),
            protocol_fraction: 1.0,
            connections_per_active_hour: 4.0,
            diurnal_profile: DiurnalProfile::default(),
            gossip_enabled: true,
            alerts_enabled: true,
            confirmations: 6,
            history_blocks: 24,
            window_capacity: 2016,
            gossip: GossipConfig::default(),
            duration_hours: 24.0,
            stop_when_decided: false,
            record_events: true,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::ConfigInvalid(m.to_string()));
        if !(0.0..=0.5).contains(&self.attacker_alpha) {
            return bad("attackerAlpha must lie in [0, 0.5]");
        }
        if !(self.honest_mean_block_minutes > 0.0 && self.detection_mean_block_minutes > 0.0) {
            return bad("block means must be positive");
        }
        if self.n_eclipsed > self.n_users {
            return bad("nEclipsed exceeds nUsers");
        }
        if !(self.duration_hours > 0.0) || !(self.eclipse_start_hours >= 0.0) {
            return bad("durationHours must be positive and eclipseStartHours non-negative");
        }
        if self.eclipse_start_hours >= self.duration_hours {
            return bad("eclipse starts after the run ends");
        }
        if self.history_blocks < self.confirmations + 2 {
            return bad("historyBlocks must cover confirmations + 2 blocks");
        }
        if self.window_capacity < 2 {
            return bad("windowCapacity must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.protocol_fraction) {
            return bad("protocolFraction must lie in [0, 1]");
        }
        if self.connections_per_active_hour < 0.0 {
            return bad("connectionsPerActiveHour must be non-negative");
        }
        if self.tier_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("tier weights must be non-negative");
        }
        if self.honest_fed_tiers.iter().any(|t| !(1..=TIER_COUNT as u8).contains(t)) {
            return bad("honestFedTiers must name tiers 1 to 6");
        }
        if self.connections_per_active_hour > 0.0
            && self.n_users > 0
            && ServerPopulation::new(&self.tier_sizes, &self.tier_weights).is_none()
        {
            return bad("users connect but no server has positive weight");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum SimEventKind {
    HonestBlock { height: u64 },
    #[serde(rename_all = "camelCase")]
    AttackerBlock { height: u64, timestamp: u32 },
    #[serde(rename_all = "camelCase")]
    AttackStart { fork_height: u64, users: Vec<String> },
    Connection { user: String, server: String },
    #[serde(rename_all = "camelCase")]
    AlertRaised { user: String, alert_type: AlertType, level: AlertLevel },
    #[serde(rename_all = "camelCase")]
    DetectionByGossip { user: String, server: String, fork_height: Option<u64>, lag_blocks: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    /// Virtual minutes.
    pub time: f64,
    #[serde(flatten)]
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionSource {
    Gossip,
    Type1,
    Type2,
}

/// Per eclipsed user; all times in minutes after the eclipse start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UserReport {
    pub user: String,
    pub detection_minutes: Option<f64>,
    pub detected_by: Option<DetectionSource>,
    pub gossip_detection_minutes: Option<f64>,
    pub first_type1_yellow_minutes: Option<f64>,
    pub first_type2_yellow_minutes: Option<f64>,
    /// First contact with a protocol server that held more blocks than the
    /// user, observed before the exchange ran.
    pub first_stronger_contact_minutes: Option<f64>,
    /// Whether the type-2 monitor stayed below yellow up to the arrival of
    /// the attacker's `confirmations + 2`-th block.
    pub escaped: Option<bool>,
}

impl UserReport {
    fn new(user: String) -> Self {
        UserReport {
            user,
            detection_minutes: None,
            detected_by: None,
            gossip_detection_minutes: None,
            first_type1_yellow_minutes: None,
            first_type2_yellow_minutes: None,
            first_stronger_contact_minutes: None,
            escaped: None,
        }
    }

    fn note_detection(&mut self, minutes: f64, source: DetectionSource) {
        if self.detection_minutes.is_none_or(|d| minutes < d) {
            self.detection_minutes = Some(minutes);
            self.detected_by = Some(source);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioResult {
    pub seed: u64,
    pub events: Vec<SimEvent>,
    pub reports: Vec<UserReport>,
    pub eclipse_start_minutes: Option<f64>,
    pub fork_height: Option<u64>,
    pub honest_height: u64,
    pub attacker_blocks: u64,
    pub end_minutes: f64,
}

impl ScenarioResult {
    /// Event log as JSON lines.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }
}

/// Connection records of a log, in the metrics trace format.
pub fn export_trace(events: &[SimEvent]) -> Result<ConnectionTrace, MetricsError> {
    let records = events
        .iter()
        .filter_map(|e| match &e.kind {
            SimEventKind::Connection { user, server } => Some(Connection {
                time: (e.time * 60.0).round() as i64,
                user: user.clone(),
                server: server.clone(),
            }),
            _ => None,
        })
        .collect();
    ConnectionTrace::new(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    HonestBlock,
    AttackerBlock,
    AttackStart,
    Connection(usize),
    AlertCheck(usize, u64),
    End,
}

impl Action {
    fn rank(self) -> u8 {
        match self {
            Action::HonestBlock => 0,
            Action::AttackerBlock => 1,
            Action::AttackStart => 2,
            Action::Connection(_) => 3,
            Action::AlertCheck(..) => 4,
            Action::End => 5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    time: f64,
    rank: u8,
    seq: u64,
    action: Action,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed: BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.rank.cmp(&self.rank))
            .then(other.seq.cmp(&self.seq))
    }
}

fn unix_secs(minutes: f64) -> i64 {
    BASE_UNIX_TIME + (minutes * 60.0).round() as i64
}

fn minutes_of(secs: i64) -> f64 {
    (secs - BASE_UNIX_TIME) as f64 / 60.0
}

struct Victim {
    user: usize,
    window: Option<HeaderWindow>,
    monitor: Option<AlertMonitor>,
    check_gen: u64,
    report: UserReport,
}

struct Server {
    id: String,
    protocol: bool,
    honest_fed: bool,
    window: HeaderWindow,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Queued>,
    seq: u64,
    events: Vec<SimEvent>,
    engine: AlertEngine,
    honest: ChainBuilder,
    honest_window: HeaderWindow,
    honest_height: u64,
    attacker: Option<ChainBuilder>,
    fork: Option<(u64, BlockHeader)>,
    attacker_blocks: u64,
    armed: bool,
    eclipse_start: Option<f64>,
    user_ids: Vec<String>,
    victims: Vec<Victim>,
    servers: Vec<Server>,
    population: Option<ServerPopulation>,
    pending: BTreeMap<(usize, usize), GossipMessage>,
    directories: Vec<ServerDirectory>,
    now: f64,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = BlockTimingModel::with_mean(cfg.detection_mean_block_minutes);
        let engine = AlertEngine::new(model, cfg.confirmations);
        let population = ServerPopulation::new(&cfg.tier_sizes, &cfg.tier_weights);

        let mut honest = ChainBuilder::new(EASY_BITS);
        let mut history = Vec::with_capacity(cfg.history_blocks);
        for i in 0..cfg.history_blocks {
            let t = -((cfg.history_blocks - 1 - i) as f64) * cfg.honest_mean_block_minutes;
            history.push(honest.next(unix_secs(t) as u32));
        }
        let honest_window = HeaderWindow::from_headers(cfg.window_capacity, 0, &history).expect("mined history links");

        let mut servers = Vec::new();
        if let Some(pop) = &population {
            for (id, &tier) in pop.ids.iter().zip(&pop.tiers) {
                let protocol = cfg.protocol_fraction >= 1.0 || rng.random::<f64>() < cfg.protocol_fraction;
                servers.push(Server {
                    id: id.clone(),
                    protocol,
                    honest_fed: cfg.honest_fed_tiers.contains(&tier),
                    window: honest_window.clone(),
                });
            }
        }

        let user_ids: Vec<String> = (0..cfg.n_users).map(|u| format!("u{u}")).collect();
        let victims = (0..cfg.n_eclipsed)
            .map(|u| {
                let monitor = cfg.alerts_enabled.then(|| {
                    let mut m = AlertMonitor::new(model, cfg.confirmations);
                    for ih in honest_window.iter() {
                        let ts = ih.header.timestamp as i64;
                        m.state.observe_block(ts, ts);
                    }
                    m.state.current = m.engine.evaluate(&m.state, unix_secs(0.0));
                    m
                });
                Victim { user: u, window: None, monitor, check_gen: 0, report: UserReport::new(user_ids[u].clone()) }
            })
            .collect();

        Sim {
            cfg,
            rng,
            queue: BinaryHeap::new(),
            seq: 0,
            events: Vec::new(),
            engine,
            honest,
            honest_height: cfg.history_blocks as u64 - 1,
            honest_window,
            attacker: None,
            fork: None,
            attacker_blocks: 0,
            armed: false,
            eclipse_start: None,
            directories: vec![ServerDirectory::new(); cfg.n_users],
            user_ids,
            victims,
            servers,
            population,
            pending: BTreeMap::new(),
            now: 0.0,
        }
    }

    fn schedule(&mut self, time: f64, action: Action) {
        self.seq += 1;
        self.queue.push(Queued { time, rank: action.rank(), seq: self.seq, action });
    }

    fn log(&mut self, kind: SimEventKind) {
        if self.cfg.record_events {
            self.events.push(SimEvent { time: self.now, kind });
        }
    }

    fn honest_rate(&self) -> f64 {
        (1.0 - self.cfg.attacker_alpha) / self.cfg.honest_mean_block_minutes
    }

    fn attacker_rate(&self) -> f64 {
        self.cfg.attacker_alpha / self.cfg.honest_mean_block_minutes
    }

    fn exp_after(&mut self, rate: f64) -> Option<f64> {
        (rate > 0.0).then(|| self.now + Exp::new(rate).expect("positive rate").sample(&mut self.rng))
    }

    fn schedule_connection(&mut self, user: usize) {
        if self.servers.is_empty() {
            return;
        }
        let per_minute = self.cfg.connections_per_active_hour / 60.0;
        if let Some(t) = self.cfg.diurnal_profile.next_arrival(self.now, per_minute, &mut self.rng) {
            self.schedule(t, Action::Connection(user));
        }
    }

    fn reschedule_check(&mut self, v: usize) {
        let victim = &mut self.victims[v];
        victim.check_gen += 1;
        let gen = victim.check_gen;
        let Some(m) = &victim.monitor else { return };
        if let Some(at) = m.next_escalation(unix_secs(self.now)) {
            self.schedule(minutes_of(at), Action::AlertCheck(v, gen));
        }
    }

    fn record_alerts(&mut self, v: usize, alerts: Vec<crate::alerts::AlertEvent>) {
        for a in alerts {
            let user = self.victims[v].report.user.clone();
            self.log(SimEventKind::AlertRaised { user, alert_type: a.alert_type, level: a.level });
            let Some(start) = self.eclipse_start else { continue };
            if a.level < AlertLevel::Yellow {
                continue;
            }
            let rel = self.now - start;
            let report = &mut self.victims[v].report;
            match a.alert_type {
                AlertType::Type1 => {
                    report.first_type1_yellow_minutes.get_or_insert(rel);
                    report.note_detection(rel, DetectionSource::Type1);
                }
                AlertType::Type2 => {
                    report.first_type2_yellow_minutes.get_or_insert(rel);
                    report.note_detection(rel, DetectionSource::Type2);
                }
            }
        }
    }

    fn observe(&mut self, v: usize, header: &BlockHeader) {
        let now_secs = unix_secs(self.now);
        let alerts = match &mut self.victims[v].monitor {
            Some(m) => m.observe_block(header.timestamp as i64, now_secs),
            None => return,
        };
        self.record_alerts(v, alerts);
        self.reschedule_check(v);
    }

    fn on_honest_block(&mut self) {
        let header = self.honest.next(unix_secs(self.now) as u32);
        self.honest_height += 1;
        self.honest_window.append(header, self.honest_height).expect("honest chain extends its own window");
        self.log(SimEventKind::HonestBlock { height: self.honest_height });
        for s in 0..self.servers.len() {
            if self.servers[s].honest_fed {
                self.servers[s].window = self.honest_window.clone();
            }
        }
        for v in 0..self.victims.len() {
            if self.victims[v].window.is_none() {
                self.observe(v, &header);
            }
        }
        if self.armed {
            self.armed = false;
            self.begin_attack();
        }
        if let Some(t) = self.exp_after(self.honest_rate()) {
            self.schedule(t, Action::HonestBlock);
        }
    }

    fn begin_attack(&mut self) {
        let tip = self.honest_window.tip().expect("history is never empty");
        self.fork = Some((tip.height, tip.header));
        self.eclipse_start = Some(self.now);
        self.attacker = Some(ChainBuilder::from_tip(tip.header, 0xa77a_c4e5));
        for v in &mut self.victims {
            v.window = Some(self.honest_window.clone());
        }
        let users = self.victims.iter().map(|v| v.report.user.clone()).collect();
        self.log(SimEventKind::AttackStart { fork_height: tip.height, users });
        for v in 0..self.victims.len() {
            self.reschedule_check(v);
        }
        if let Some(t) = self.exp_after(self.attacker_rate()) {
            self.schedule(t, Action::AttackerBlock);
        }
    }

    fn on_attacker_block(&mut self) {
        let (fork_height, fork_header) = self.fork.expect("attacker mines after the fork");
        self.attacker_blocks += 1;
        let count = self.attacker_blocks;
        let real = unix_secs(self.now);
        let ts = match self.cfg.attacker_timestamps {
            TimestampMode::HonestClock => real,
            TimestampMode::Backdated => {
                let paced = fork_header.timestamp as i64 + (count as f64 * self.cfg.honest_mean_block_minutes * 60.0) as i64;
                paced.min(real)
            }
        };
        let header = self.attacker.as_mut().expect("attacker exists").next(ts as u32);
        let height = fork_height + count;
        self.log(SimEventKind::AttackerBlock { height, timestamp: header.timestamp });
        let decisive = count == self.cfg.confirmations as u64 + 2;
        for v in 0..self.victims.len() {
            let links = self.victims[v].window.as_ref().is_some_and(|w| w.tip_hash() == Some(header.prev_hash));
            if !links {
                continue;
            }
            if decisive && self.victims[v].report.escaped.is_none() {
                if let Some(m) = &self.victims[v].monitor {
                    let level = self.engine.evaluate(&m.state, real).type2;
                    self.victims[v].report.escaped = Some(level < AlertLevel::Yellow);
                }
            }
            let w = self.victims[v].window.as_mut().expect("checked above");
            if w.append(header, height).is_ok() {
                self.observe(v, &header);
            }
        }
        if let Some(t) = self.exp_after(self.attacker_rate()) {
            self.schedule(t, Action::AttackerBlock);
        }
    }

    fn on_connection(&mut self, user: usize) {
        let Some(pop) = &self.population else { return };
        let s = pop.pick(&mut self.rng);
        let server_id = self.servers[s].id.clone();
        self.log(SimEventKind::Connection { user: self.user_ids[user].clone(), server: server_id.clone() });
        self.schedule_connection(user);
        if !self.cfg.gossip_enabled || !self.servers[s].protocol {
            return;
        }
        let victim = self.victims.iter().position(|v| v.user == user && v.window.is_some());
        let local = match victim {
            Some(v) => self.victims[v].window.clone().expect("eclipsed"),
            None => self.honest_window.clone(),
        };
        if let (Some(v), Some(start)) = (victim, self.eclipse_start) {
            let stronger = self.servers[s].window.tail_height() > local.tail_height();
            let report = &mut self.victims[v].report;
            if stronger && report.first_stronger_contact_minutes.is_none() {
                report.first_stronger_contact_minutes = Some(self.now - start);
            }
        }

        let mut msg = client_initiate(&local, &self.cfg.gossip);
        if let Some(follow_up) = self.pending.remove(&(user, s)) {
            msg.payload = follow_up.payload;
        }
        let resp = server_respond(&self.servers[s].window, &msg, &self.cfg.gossip);
        self.servers[s].window = resp.window;
        let f = client_fulfill(&local, &resp.reply, &self.cfg.gossip);
        self.directories[user].record(&server_id, unix_secs(self.now));
        if let Some(follow_up) = f.follow_up {
            self.pending.insert((user, s), follow_up);
        }
        let Some(v) = victim else { return };

        let learned: Vec<BlockHeader> = f
            .window
            .iter()
            .filter(|ih| local.hash_at(ih.height) != Some(ih.header.block_hash()))
            .map(|ih| ih.header)
            .collect();
        self.victims[v].window = Some(f.window);
        for h in &learned {
            self.observe(v, h);
        }
        let start = self.eclipse_start.expect("victim windows exist only after the eclipse");
        if f.outcome.detects(&self.cfg.gossip) && self.victims[v].report.gossip_detection_minutes.is_none() {
            let rel = self.now - start;
            let report = &mut self.victims[v].report;
            report.gossip_detection_minutes = Some(rel);
            report.note_detection(rel, DetectionSource::Gossip);
            let user = report.user.clone();
            self.log(SimEventKind::DetectionByGossip {
                user,
                server: server_id,
                fork_height: f.outcome.fork_height,
                lag_blocks: f.outcome.lag_blocks,
            });
        }
    }

    fn on_alert_check(&mut self, v: usize, gen: u64) {
        if self.victims[v].check_gen != gen {
            return;
        }
        let now_secs = unix_secs(self.now);
        let alerts = match &mut self.victims[v].monitor {
            Some(m) => m.tick(now_secs),
            None => return,
        };
        self.record_alerts(v, alerts);
        self.reschedule_check(v);
    }

    fn decided(&self) -> bool {
        self.eclipse_start.is_some()
            && self.victims.iter().all(|v| {
                v.report.detection_minutes.is_some() && (self.cfg.attacker_alpha == 0.0 || v.report.escaped.is_some())
            })
    }

    fn run(mut self) -> ScenarioResult {
        let end = self.cfg.duration_hours * 60.0;
        self.schedule(end, Action::End);
        self.schedule(self.cfg.eclipse_start_hours * 60.0, Action::AttackStart);
        if let Some(t) = self.exp_after(self.honest_rate()) {
            self.schedule(t, Action::HonestBlock);
        }
        for u in 0..self.cfg.n_users {
            self.schedule_connection(u);
        }
        for v in 0..self.victims.len() {
            self.reschedule_check(v);
        }
        while let Some(q) = self.queue.pop() {
            self.now = q.time;
            match q.action {
                Action::End => break,
                Action::HonestBlock => self.on_honest_block(),
                Action::AttackerBlock => self.on_attacker_block(),
                Action::AttackStart => {
                    if self.cfg.align_eclipse_to_block {
                        self.armed = true;
                    } else {
                        self.begin_attack();
                    }
                }
                Action::Connection(u) => self.on_connection(u),
                Action::AlertCheck(v, gen) => self.on_alert_check(v, gen),
            }
            if self.cfg.stop_when_decided && self.decided() {
                break;
            }
        }
        ScenarioResult {
            seed: self.cfg.seed,
            events: self.events,
            reports: self.victims.into_iter().map(|v| v.report).collect(),
            eclipse_start_minutes: self.eclipse_start,
            fork_height: self.fork.map(|f| f.0),
            honest_height: self.honest_height,
            attacker_blocks: self.attacker_blocks,
            end_minutes: self.now,
        }
    }
}

/// Runs one scenario to completion.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult, SimError> {
    cfg.validate()?;
    Ok(Sim::new(cfg).run())
}

/// Runs `runs` copies with seeds `cfg.seed, cfg.seed + 1, ...` across up to
/// `threads` workers. Results come back in seed order.
pub fn run_batch(cfg: &ScenarioConfig, runs: usize, threads: usize) -> Result<Vec<ScenarioResult>, SimError> {
    cfg.validate()?;
    let threads = threads.clamp(1, runs.max(1));
    let mut results: Vec<Option<ScenarioResult>> = vec![None; runs];
    std::thread::scope(|scope| {
        for (w, chunk) in results.chunks_mut(runs.div_ceil(threads).max(1)).enumerate() {
            let base = w * runs.div_ceil(threads).max(1);
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    let mut c = cfg.clone();
                    c.seed = cfg.seed.wrapping_add((base + i) as u64);
                    *slot = Some(Sim::new(&c).run());
                }
            });
        }
    });
    Ok(results.into_iter().map(|r| r.expect("every slot filled")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BatchSummary {
    pub runs: usize,
    pub eclipsed_users: usize,
    pub detected: usize,
    pub median_detection_minutes: Option<f64>,
    pub mean_detection_minutes: Option<f64>,
    pub median_type1_yellow_minutes: Option<f64>,
    pub escape_decided: usize,
    pub escape_rate: Option<f64>,
    pub escape_standard_error: Option<f64>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

pub fn summarize(results: &[ScenarioResult]) -> BatchSummary {
    let reports: Vec<&UserReport> = results.iter().flat_map(|r| &r.reports).collect();
    let detections: Vec<f64> = reports.iter().filter_map(|r| r.detection_minutes).collect();
    let yellows: Vec<f64> = reports.iter().filter_map(|r| r.first_type1_yellow_minutes).collect();
    let escapes: Vec<bool> = reports.iter().filter_map(|r| r.escaped).collect();
    let (rate, se) = if escapes.is_empty() {
        (None, None)
    } else {
        let p = escapes.iter().filter(|&&e| e).count() as f64 / escapes.len() as f64;
        (Some(p), Some((p * (1.0 - p) / escapes.len() as f64).sqrt()))
    };
    BatchSummary {
        runs: results.len(),
        eclipsed_users: reports.len(),
        detected: detections.len(),
        mean_detection_minutes: (!detections.is_empty()).then(|| detections.iter().sum::<f64>() / detections.len() as f64),
        median_detection_minutes: median(detections),
        median_type1_yellow_minutes: median(yellows),
        escape_decided: escapes.len(),
        escape_rate: rate,
        escape_standard_error: se,
    }
}

/// Detection-time counts in bins of `bin_minutes`, as (bin start, count).
pub fn detection_histogram(results: &[ScenarioResult], bin_minutes: f64) -> Vec<(f64, usize)> {
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for d in results.iter().flat_map(|r| &r.reports).filter_map(|r| r.detection_minutes) {
        *bins.entry((d / bin_minutes).floor() as i64).or_default() += 1;
    }
    bins.into_iter().map(|(b, n)| (b as f64 * bin_minutes, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_cfg() -> ScenarioConfig {
        ScenarioConfig {
            n_users: 1,
            connections_per_active_hour: 0.0,
            gossip_enabled: false,
            stop_when_decided: true,
            ..Default::default()
        }
    }

    #[test]
    fn alpha_zero_type1_yellow_at_threshold() {
        let r = run_scenario(&quiet_cfg()).unwrap();
        let rep = &r.reports[0];
        assert_eq!(rep.detected_by, Some(DetectionSource::Type1));
        let t = rep.first_type1_yellow_minutes.unwrap();
        assert!((t - 55.262).abs() < 0.05, "{t}");
    }

    #[test]
    fn deterministic_logs() {
        let cfg = ScenarioConfig { seed: 7, attacker_alpha: 0.1, ..Default::default() };
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert_eq!(a.events_jsonl(), b.events_jsonl());
        assert!(!a.events.is_empty());
        assert!(a.events.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn gossip_detects_at_first_stronger_contact() {
        for seed in 0..20 {
            let cfg = ScenarioConfig { seed, alerts_enabled: false, ..Default::default() };
            let r = run_scenario(&cfg).unwrap();
            let rep = &r.reports[0];
            assert_eq!(rep.gossip_detection_minutes, rep.first_stronger_contact_minutes, "seed {seed}");
        }
    }

    #[test]
    fn attacker_escape_recorded() {
        let cfg = ScenarioConfig { attacker_alpha: 0.5, duration_hours: 48.0, seed: 3, ..quiet_cfg() };
        let r = run_scenario(&cfg).unwrap();
        assert!(r.reports[0].escaped.is_some());
        assert!(r.attacker_blocks >= 8);
    }

    #[test]
    fn backdated_needs_delta() {
        let cfg = ScenarioConfig {
            attacker_alpha: 0.05,
            attacker_timestamps: TimestampMode::Backdated,
            duration_hours: 48.0,
            seed: 11,
            ..quiet_cfg()
        };
        let r = run_scenario(&cfg).unwrap();
        assert!(r.reports[0].detection_minutes.is_some());
    }

    #[test]
    fn trace_export() {
        let r = run_scenario(&ScenarioConfig { seed: 2, ..Default::default() }).unwrap();
        let n = r.events.iter().filter(|e| matches!(e.kind, SimEventKind::Connection { .. })).count();
        let trace = export_trace(&r.events).unwrap();
        assert_eq!(trace.len(), n);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(ConnectionTrace::read_csv(&buf[..]).unwrap(), trace);
    }

    #[test]
    fn invalid_configs() {
        assert!(run_scenario(&ScenarioConfig { attacker_alpha: 0.6, ..Default::default() }).is_err());
        assert!(run_scenario(&ScenarioConfig { n_eclipsed: 20, ..Default::default() }).is_err());
        assert!(run_scenario(&ScenarioConfig { eclipse_start_hours: 30.0, ..Default::default() }).is_err());
    }

    #[test]
    fn batch_matches_single_runs() {
        let cfg = ScenarioConfig { seed: 40, ..quiet_cfg() };
        let batch = run_batch(&cfg, 5, 3).unwrap();
        for (i, r) in batch.iter().enumerate() {
            let single = run_scenario(&ScenarioConfig { seed: 40 + i as u64, ..cfg.clone() }).unwrap();
            assert_eq!(r, &single);
        }
        assert_eq!(summarize(&batch).runs, 5);
    }
}
