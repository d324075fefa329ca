//! Timestamp-based eclipse detection.
//!
//! Block creation is modelled as a Poisson process with a conservative mean
//! of 12 minutes per block. Two monitors run side by side:
//!
//! * type 1 (DoS-style eclipse, attacker without hash power): time since the
//!   creation of the last block;
//! * type 2 (double-spend eclipse, attacker with hash power): the creation
//!   span of the last `k + 2` blocks, padded with the time since the last block
//!   arrived locally so that backdated timestamps cannot hide a slow chain.
//!
//! A monitor raises yellow, orange or red once the probability of seeing so
//! few blocks drops below 1e-2, 1e-4 or 1e-6.
//!
//! The type-2 span covers `k + 1` creation gaps and is judged as "k + 1 or
//! fewer blocks in t minutes", i.e. against Erlang(k + 2) quantiles. For
//! k = 6 this gives thresholds of about 192, 276 and 350 minutes.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Probability thresholds for yellow, orange and red.
pub const LEVEL_PROBABILITIES: [f64; 3] = [1e-2, 1e-4, 1e-6];

/// Default number of confirmations a type-2 monitor protects.
pub const DEFAULT_CONFIRMATIONS: usize = 6;

/// Poisson block-timing model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockTimingModel {
    /// Mean minutes per block assumed by the detector.
    pub mean_block_minutes: f64,
    /// The network's calibrated mean.
    pub nominal_mean_minutes: f64,
}

impl Default for BlockTimingModel {
    fn default() -> Self {
        BlockTimingModel { mean_block_minutes: 12.0, nominal_mean_minutes: 10.0 }
    }
}

impl BlockTimingModel {
    pub fn with_mean(mean_block_minutes: f64) -> Self {
        BlockTimingModel { mean_block_minutes, ..Default::default() }
    }

    pub fn rate_per_minute(&self) -> f64 {
        1.0 / self.mean_block_minutes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlertLevel {
    Green,
    Yellow,
    Orange,
    Red,
}

impl AlertLevel {
    pub const ALARMS: [AlertLevel; 3] = [AlertLevel::Yellow, AlertLevel::Orange, AlertLevel::Red];

    /// Colour class of an observation with the given probability.
    pub fn from_probability(p: f64) -> Self {
        if p < LEVEL_PROBABILITIES[2] {
            AlertLevel::Red
        } else if p < LEVEL_PROBABILITIES[1] {
            AlertLevel::Orange
        } else if p < LEVEL_PROBABILITIES[0] {
            AlertLevel::Yellow
        } else {
            AlertLevel::Green
        }
    }

    /// Probability below which this level fires; `None` for green.
    pub fn probability(self) -> Option<f64> {
        match self {
            AlertLevel::Green => None,
            AlertLevel::Yellow => Some(LEVEL_PROBABILITIES[0]),
            AlertLevel::Orange => Some(LEVEL_PROBABILITIES[1]),
            AlertLevel::Red => Some(LEVEL_PROBABILITIES[2]),
        }
    }
}

impl fmt::Display for AlertLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlertLevel::Green => "green",
            AlertLevel::Yellow => "yellow",
            AlertLevel::Orange => "orange",
            AlertLevel::Red => "red",
        })
    }
}

fn ln_poisson_term(i: u32, mu: f64) -> f64 {
    -mu + i as f64 * mu.ln() - ln_gamma(i as f64 + 1.0)
}

/// P[N <= n] for N ~ Poisson(mu).
pub fn poisson_cdf(n: u32, mu: f64) -> f64 {
    if mu <= 0.0 {
        return 1.0;
    }
    if mu > n as f64 + 1.0 {
        // Far tail: sum the lower terms directly, they are all tiny.
        return (0..=n).map(|i| ln_poisson_term(i, mu).exp()).sum::<f64>().min(1.0);
    }
    (1.0 - poisson_sf(n, mu)).clamp(0.0, 1.0)
}

/// P[N > n] for N ~ Poisson(mu).
pub fn poisson_sf(n: u32, mu: f64) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    if mu > n as f64 + 1.0 {
        return (1.0 - poisson_cdf(n, mu)).clamp(0.0, 1.0);
    }
    let mut total = 0.0;
    let mut i = n + 1;
    loop {
        let term = ln_poisson_term(i, mu).exp();
        total += term;
        if term < total * 1e-17 || term == 0.0 {
            break;
        }
        i += 1;
    }
    total.min(1.0)
}

/// P[Erlang(shape, rate) <= x]: the chance that `shape` exponential gaps fit
/// into `x`.
pub fn erlang_cdf(shape: u32, rate: f64, x: f64) -> f64 {
    assert!(shape >= 1, "Erlang shape must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    poisson_sf(shape - 1, rate * x)
}

/// Probability of observing `n` or fewer block creations during the last
/// `t_minutes`.
pub fn prob_at_most_n_blocks(n: u32, t_minutes: f64, model: &BlockTimingModel) -> f64 {
    assert!(t_minutes >= 0.0, "elapsed time must be non-negative");
    poisson_cdf(n, t_minutes * model.rate_per_minute())
}

/// Elapsed minutes at which each alarm level starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertThresholds {
    pub yellow: f64,
    pub orange: f64,
    pub red: f64,
}

impl AlertThresholds {
    pub fn get(&self, level: AlertLevel) -> Option<f64> {
        match level {
            AlertLevel::Green => None,
            AlertLevel::Yellow => Some(self.yellow),
            AlertLevel::Orange => Some(self.orange),
            AlertLevel::Red => Some(self.red),
        }
    }

    /// Highest level whose threshold `elapsed_minutes` exceeds.
    pub fn classify(&self, elapsed_minutes: f64) -> AlertLevel {
        if elapsed_minutes > self.red {
            AlertLevel::Red
        } else if elapsed_minutes > self.orange {
            AlertLevel::Orange
        } else if elapsed_minutes > self.yellow {
            AlertLevel::Yellow
        } else {
            AlertLevel::Green
        }
    }
}

/// Solves `prob_at_most_n_blocks(k_blocks - 1, t) = p` by bisection.
pub fn quantile_minutes(k_blocks: u32, p: f64, model: &BlockTimingModel) -> f64 {
    assert!(k_blocks >= 1, "need at least one block");
    assert!(p > 0.0 && p < 1.0, "probability must lie in (0, 1)");
    let n = k_blocks - 1;
    let mut lo = 0.0;
    let mut hi = model.mean_block_minutes * (k_blocks as f64 + 10.0);
    while prob_at_most_n_blocks(n, hi, model) > p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if prob_at_most_n_blocks(n, mid, model) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Minutes after which the creation of only `k_blocks - 1` or fewer blocks
/// becomes a yellow, orange or red event.
pub fn alert_thresholds(k_blocks: u32, model: &BlockTimingModel) -> AlertThresholds {
    AlertThresholds {
        yellow: quantile_minutes(k_blocks, LEVEL_PROBABILITIES[0], model),
        orange: quantile_minutes(k_blocks, LEVEL_PROBABILITIES[1], model),
        red: quantile_minutes(k_blocks, LEVEL_PROBABILITIES[2], model),
    }
}

/// Thresholds applied to the type-2 span of `confirmations + 2` blocks.
pub fn type2_thresholds(confirmations: usize, model: &BlockTimingModel) -> AlertThresholds {
    alert_thresholds(confirmations as u32 + 2, model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LevelPair {
    pub type1: AlertLevel,
    pub type2: AlertLevel,
}

impl Default for LevelPair {
    fn default() -> Self {
        LevelPair { type1: AlertLevel::Green, type2: AlertLevel::Green }
    }
}

/// Rolling record of recent block creation and arrival times (Unix seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertState {
    confirmations: usize,
    creation: VecDeque<i64>,
    arrival: VecDeque<i64>,
    pub current: LevelPair,
}

impl AlertState {
    pub fn new(confirmations: usize) -> Self {
        AlertState {
            confirmations,
            creation: VecDeque::with_capacity(confirmations + 2),
            arrival: VecDeque::with_capacity(confirmations + 2),
            current: LevelPair::default(),
        }
    }

    pub fn confirmations(&self) -> usize {
        self.confirmations
    }

    pub fn len(&self) -> usize {
        self.creation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.creation.is_empty()
    }

    pub fn creation_times(&self) -> impl Iterator<Item = i64> + '_ {
        self.creation.iter().copied()
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.creation.back().copied()
    }

    pub fn last_arrival(&self) -> Option<i64> {
        self.arrival.back().copied()
    }

    /// Records a block. A timestamp lower than its predecessor's is raised to
    /// it, so the gap counts as zero.
    pub fn observe_block(&mut self, timestamp: i64, arrival: i64) {
        let ts = self.creation.back().map_or(timestamp, |&last| timestamp.max(last));
        self.creation.push_back(ts);
        self.arrival.push_back(arrival);
        while self.creation.len() > self.confirmations + 2 {
            self.creation.pop_front();
            self.arrival.pop_front();
        }
    }

    /// Minutes since the last block's claimed creation.
    pub fn type1_elapsed(&self, now: i64) -> Option<f64> {
        self.last_timestamp().map(|ts| (now - ts).max(0) as f64 / 60.0)
    }

    /// Creation span of the last `k + 2` blocks plus the time since the
    /// newest arrived, in minutes. `None` until the buffer is full.
    pub fn type2_elapsed(&self, now: i64) -> Option<f64> {
        if self.creation.len() < self.confirmations + 2 {
            return None;
        }
        let span = self.creation.back()? - self.creation.front()?;
        let delta = (now - self.last_arrival()?).max(0);
        Some((span + delta) as f64 / 60.0)
    }

    /// Alert levels at `now`, recomputing thresholds from `model`.
    pub fn evaluate(&self, now: i64, model: &BlockTimingModel) -> LevelPair {
        AlertEngine::new(*model, self.confirmations).evaluate(self, now)
    }
}

/// Thresholds precomputed for one model and confirmation depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertEngine {
    pub model: BlockTimingModel,
    pub confirmations: usize,
    pub type1: AlertThresholds,
    pub type2: AlertThresholds,
}

impl AlertEngine {
    pub fn new(model: BlockTimingModel, confirmations: usize) -> Self {
        AlertEngine {
            model,
            confirmations,
            type1: alert_thresholds(1, &model),
            type2: type2_thresholds(confirmations, &model),
        }
    }

    pub fn evaluate(&self, state: &AlertState, now: i64) -> LevelPair {
        LevelPair {
            type1: state.type1_elapsed(now).map_or(AlertLevel::Green, |m| self.type1.classify(m)),
            type2: state.type2_elapsed(now).map_or(AlertLevel::Green, |m| self.type2.classify(m)),
        }
    }

    /// Earliest time after `now` at which a level would rise if no block
    /// arrives, in whole seconds.
    pub fn next_escalation(&self, state: &AlertState, now: i64) -> Option<i64> {
        let levels = self.evaluate(state, now);
        let mut best: Option<i64> = None;
        let mut consider = |t: i64| {
            if t > now {
                best = Some(best.map_or(t, |b| b.min(t)));
            }
        };
        if let (Some(last), Some(thr)) = (state.last_timestamp(), next_threshold(&self.type1, levels.type1)) {
            consider(last + (thr * 60.0).floor() as i64 + 1);
        }
        if let (Some(elapsed), Some(thr)) = (state.type2_elapsed(now), next_threshold(&self.type2, levels.type2)) {
            let missing = ((thr - elapsed) * 60.0).floor() as i64 + 1;
            consider(now + missing.max(1));
        }
        best
    }
}

fn next_threshold(t: &AlertThresholds, current: AlertLevel) -> Option<f64> {
    match current {
        AlertLevel::Green => Some(t.yellow),
        AlertLevel::Yellow => Some(t.orange),
        AlertLevel::Orange => Some(t.red),
        AlertLevel::Red => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlertType {
    Type1,
    Type2,
}

/// Structured alert record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub time: i64,
    #[serde(rename = "type")]
    pub alert_type: AlertType,
    pub level: AlertLevel,
    #[serde(rename = "elapsedMinutes")]
    pub elapsed_minutes: f64,
    #[serde(rename = "kBlocks")]
    pub k_blocks: u32,
}

/// State plus engine; reports level increases as events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertMonitor {
    pub engine: AlertEngine,
    pub state: AlertState,
}

impl AlertMonitor {
    pub fn new(model: BlockTimingModel, confirmations: usize) -> Self {
        AlertMonitor { engine: AlertEngine::new(model, confirmations), state: AlertState::new(confirmations) }
    }

    /// Records a block and re-evaluates; a new block can only lower levels.
    pub fn observe_block(&mut self, timestamp: i64, arrival: i64) -> Vec<AlertEvent> {
        self.state.observe_block(timestamp, arrival);
        self.tick(arrival)
    }

    /// Re-evaluates at `now`, returning one event per type whose level rose.
    pub fn tick(&mut self, now: i64) -> Vec<AlertEvent> {
        let levels = self.engine.evaluate(&self.state, now);
        let mut events = Vec::new();
        if levels.type1 > self.state.current.type1 {
            events.push(AlertEvent {
                time: now,
                alert_type: AlertType::Type1,
                level: levels.type1,
                elapsed_minutes: self.state.type1_elapsed(now).unwrap_or(0.0),
                k_blocks: 1,
            });
        }
        if levels.type2 > self.state.current.type2 {
            events.push(AlertEvent {
                time: now,
                alert_type: AlertType::Type2,
                level: levels.type2,
                elapsed_minutes: self.state.type2_elapsed(now).unwrap_or(0.0),
                k_blocks: self.engine.confirmations as u32 + 2,
            });
        }
        for e in &events {
            tracing::debug!(time = e.time, alert_type = ?e.alert_type, level = %e.level,
                elapsed_minutes = e.elapsed_minutes, k_blocks = e.k_blocks, "timestamp alert");
        }
        self.state.current = levels;
        events
    }

    pub fn next_escalation(&self, now: i64) -> Option<i64> {
        self.engine.next_escalation(&self.state, now)
    }
}

/// An adversary holding fraction `alpha` of the mining power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackerModel {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("attacker share {0} outside (0, 0.5]")]
pub struct InvalidAlpha(pub f64);

impl AttackerModel {
    pub fn new(alpha: f64) -> Result<Self, InvalidAlpha> {
        if alpha > 0.0 && alpha <= 0.5 {
            Ok(AttackerModel { alpha })
        } else {
            Err(InvalidAlpha(alpha))
        }
    }
}

/// How the attacker's block race is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EscapeModel {
    /// The attacker's `n + 1` creation intervals, at `alpha` times the
    /// detector's block rate, against the Erlang(n + 1) threshold of the
    /// detection model. Reproduces the published attack table.
    #[default]
    Tabulated,
    /// `n` intervals at `alpha` times the nominal 10-minute rate against the
    /// Erlang(n) threshold of the conservative model.
    NominalRate,
}

impl EscapeModel {
    /// (gap count, attacker rate per minute, threshold minutes).
    fn race(self, attacker: &AttackerModel, level: AlertLevel, n_blocks: u32, model: &BlockTimingModel) -> Option<(u32, f64, f64)> {
        let (shape, rate) = match self {
            EscapeModel::Tabulated => (n_blocks + 1, attacker.alpha / model.mean_block_minutes),
            EscapeModel::NominalRate => (n_blocks, attacker.alpha / model.nominal_mean_minutes),
        };
        let threshold = quantile_minutes(shape, level.probability()?, model);
        Some((shape, rate, threshold))
    }
}

/// Probability that an attacker mines `n_blocks` quickly enough to stay under
/// the threshold for `level`. Green never fires, so it yields 1.
pub fn attacker_escape_probability(
    attacker: &AttackerModel,
    level: AlertLevel,
    n_blocks: u32,
    model: &BlockTimingModel,
    escape: EscapeModel,
) -> f64 {
    match escape.race(attacker, level, n_blocks, model) {
        Some((shape, rate, threshold)) => erlang_cdf(shape, rate, threshold),
        None => 1.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub probability: f64,
    pub standard_error: f64,
    pub trials: u64,
}

/// Monte-Carlo counterpart of [`attacker_escape_probability`]: sums
/// independent exponential gaps directly.
pub fn attacker_escape_monte_carlo<R: Rng + ?Sized>(
    attacker: &AttackerModel,
    level: AlertLevel,
    n_blocks: u32,
    model: &BlockTimingModel,
    escape: EscapeModel,
    trials: u64,
    rng: &mut R,
) -> MonteCarloEstimate {
    let Some((shape, rate, threshold)) = escape.race(attacker, level, n_blocks, model) else {
        return MonteCarloEstimate { probability: 1.0, standard_error: 0.0, trials };
    };
    let gaps = Exp::new(rate).expect("positive rate");
    let hits = (0..trials)
        .filter(|_| {
            let mut total = 0.0;
            for _ in 0..shape {
                total += gaps.sample(rng);
                if total > threshold {
                    return false;
                }
            }
            true
        })
        .count() as f64;
    let p = hits / trials as f64;
    MonteCarloEstimate { probability: p, standard_error: (p * (1.0 - p) / trials as f64).sqrt(), trials }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m() -> BlockTimingModel {
        BlockTimingModel::default()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        ((a - b) / b).abs() < rel
    }

    #[test]
    fn table_cells() {
        assert!(close(prob_at_most_n_blocks(0, 20.0, &m()), 0.19, 0.03));
        assert!(close(prob_at_most_n_blocks(6, 180.0, &m()), 7.6e-3, 0.01));
        assert_eq!(prob_at_most_n_blocks(0, 0.0, &m()), 1.0);
        assert!(close(prob_at_most_n_blocks(0, 600.0, &m()), 1.9e-22, 0.02));
    }

    #[test]
    fn type1_thresholds_match_closed_form() {
        let t = alert_thresholds(1, &m());
        for (got, p) in [t.yellow, t.orange, t.red].into_iter().zip(LEVEL_PROBABILITIES) {
            assert!((got - (-12.0 * p.ln())).abs() < 1e-9, "{got}");
        }
    }

    #[test]
    fn thresholds_grow_with_blocks() {
        let mut prev = alert_thresholds(1, &m());
        for k in 2..20 {
            let t = alert_thresholds(k, &m());
            assert!(t.yellow > prev.yellow && t.orange > prev.orange && t.red > prev.red);
            prev = t;
        }
    }

    #[test]
    fn quantiles_roundtrip() {
        for k in [1u32, 3, 7, 8, 19] {
            for p in LEVEL_PROBABILITIES {
                let t = quantile_minutes(k, p, &m());
                assert!((prob_at_most_n_blocks(k - 1, t, &m()) - p).abs() <= 1e-9 * p);
            }
        }
    }

    #[test]
    fn buffer_clamps_and_rolls() {
        let mut s = AlertState::new(6);
        s.observe_block(1000, 1000);
        assert_eq!(s.len(), 1);
        assert_eq!(s.evaluate(1000, &m()), LevelPair::default());
        s.observe_block(980, 1010);
        assert_eq!(s.creation_times().collect::<Vec<_>>(), vec![1000, 1000]);
        for i in 0..6 {
            s.observe_block(2000 + i * 600, 2000 + i * 600);
        }
        assert_eq!(s.len(), 8);
        s.observe_block(9000, 9000);
        assert_eq!(s.len(), 8);
    }

    #[test]
    fn evaluate_examples() {
        let engine = AlertEngine::new(m(), 6);
        let mut s = AlertState::new(6);
        for i in 0..8 {
            s.observe_block(i * 10 * 60, i * 10 * 60);
        }
        let last = 70 * 60;
        assert_eq!(engine.evaluate(&s, last + 10 * 60), LevelPair::default());
        assert_eq!(engine.evaluate(&s, last + 120 * 60).type1, AlertLevel::Orange);

        let mut slow = AlertState::new(6);
        for i in 0..8 {
            slow.observe_block(i * 400 * 60 / 7, i * 400 * 60 / 7);
        }
        assert_eq!(engine.evaluate(&slow, 400 * 60).type2, AlertLevel::Red);
        assert_eq!(engine.evaluate(&slow, 400 * 60).type1, AlertLevel::Green);
    }

    #[test]
    fn next_escalation_hits_threshold() {
        let mut mon = AlertMonitor::new(m(), 6);
        mon.observe_block(0, 0);
        let t = mon.next_escalation(0).unwrap();
        assert!(mon.tick(t - 1).is_empty());
        let ev = mon.tick(t);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].level, AlertLevel::Yellow);
        assert!(t as f64 / 60.0 > 55.26 && (t as f64 / 60.0) < 55.3);
    }

    #[test]
    fn escape_reproduces_table_rows() {
        let a = AttackerModel::new(0.2).unwrap();
        let p = attacker_escape_probability(&a, AlertLevel::Yellow, 7, &m(), EscapeModel::Tabulated);
        assert!(close(p, 1.68e-2, 0.01), "{p}");
        let a = AttackerModel::new(0.05).unwrap();
        let p = attacker_escape_probability(&a, AlertLevel::Red, 7, &m(), EscapeModel::Tabulated);
        assert!(close(p, 1.40e-4, 0.01), "{p}");
        assert_eq!(attacker_escape_probability(&a, AlertLevel::Green, 7, &m(), EscapeModel::Tabulated), 1.0);
    }

    #[test]
    fn escape_monotone() {
        for escape in [EscapeModel::Tabulated, EscapeModel::NominalRate] {
            let mut prev = 0.0;
            for alpha in [0.05, 0.08, 0.125, 0.2, 0.3, 0.5] {
                let a = AttackerModel::new(alpha).unwrap();
                let y = attacker_escape_probability(&a, AlertLevel::Yellow, 7, &m(), escape);
                let o = attacker_escape_probability(&a, AlertLevel::Orange, 7, &m(), escape);
                let r = attacker_escape_probability(&a, AlertLevel::Red, 7, &m(), escape);
                assert!(y < o && o < r);
                assert!(y > prev);
                prev = y;
            }
        }
    }

    #[test]
    fn alpha_bounds() {
        assert!(AttackerModel::new(0.0).is_err());
        assert!(AttackerModel::new(0.51).is_err());
        assert!(AttackerModel::new(0.5).is_ok());
    }
}
