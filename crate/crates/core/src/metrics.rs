//! Coverage, attack detection time and server freshness over connection
//! traces.
//!
//! AADT and freshness share one shape: between consecutive connection times
//! (with the observation bounds as sentinels) the integrand is linear with
//! slope one, so each gap `g` contributes `g^2 / 2` and the metric is the sum
//! divided by the observed length.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("trace has no connections")]
    EmptyTrace,
    #[error("user {0} does not appear in the trace")]
    UnknownUser(String),
    #[error("server {0} does not appear in the trace")]
    UnknownServer(String),
    #[error("tier {tier} has {available} servers, {requested} requested")]
    InsufficientTier { tier: u8, requested: usize, available: usize },
    #[error("record at {time} lies outside the bounds [{t0}, {t_max}]")]
    OutOfBounds { time: i64, t0: i64, t_max: i64 },
    #[error("adoption fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One connection `(u_c, s_c, t_c)`, time in seconds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Connection {
    pub time: i64,
    pub user: String,
    pub server: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionTrace {
    records: Vec<Connection>,
    pub t0: i64,
    pub t_max: i64,
}

impl ConnectionTrace {
    /// Sorts the records by time; bounds default to the first and last
    /// connection.
    pub fn new(mut records: Vec<Connection>) -> Result<Self, MetricsError> {
        records.sort_by_key(|c| c.time);
        let (Some(first), Some(last)) = (records.first(), records.last()) else {
            return Err(MetricsError::EmptyTrace);
        };
        let (t0, t_max) = (first.time, last.time);
        Ok(ConnectionTrace { records, t0, t_max })
    }

    pub fn with_bounds(records: Vec<Connection>, t0: i64, t_max: i64) -> Result<Self, MetricsError> {
        let mut trace = Self::new(records)?;
        if let Some(c) = trace.records.iter().find(|c| c.time < t0 || c.time > t_max) {
            return Err(MetricsError::OutOfBounds { time: c.time, t0, t_max });
        }
        trace.t0 = t0;
        trace.t_max = t_max;
        Ok(trace)
    }

    pub fn records(&self) -> &[Connection] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn users(&self) -> BTreeSet<&str> {
        self.records.iter().map(|c| c.user.as_str()).collect()
    }

    pub fn servers(&self) -> BTreeSet<&str> {
        self.records.iter().map(|c| c.server.as_str()).collect()
    }

    /// Observation length in seconds.
    pub fn duration(&self) -> i64 {
        self.t_max - self.t0
    }

    pub fn translated(&self, dt: i64) -> Self {
        ConnectionTrace {
            records: self.records.iter().map(|c| Connection { time: c.time + dt, ..c.clone() }).collect(),
            t0: self.t0 + dt,
            t_max: self.t_max + dt,
        }
    }

    /// Reads `time,user,server` CSV.
    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, MetricsError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let records = rdr.deserialize().collect::<Result<Vec<Connection>, _>>()?;
        Self::new(records)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(writer);
        for c in &self.records {
            w.serialize(c)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Which parts of the average an inactivity cut removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Excision {
    /// Long gaps leave both the integral and the observed length.
    #[default]
    Both,
    /// Long gaps leave the integral only.
    NumeratorOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InactivityCut {
    pub hours: f64,
    pub excision: Excision,
}

impl Default for InactivityCut {
    fn default() -> Self {
        InactivityCut { hours: 8.0, excision: Excision::Both }
    }
}

/// `sum(g^2 / 2) / length` in hours over the gaps between `t0`, the sorted
/// `times` and `t_max`. Zero when every gap was cut.
fn gap_average(times: &[i64], t0: i64, t_max: i64, cut: Option<InactivityCut>) -> f64 {
    let mut integral = 0.0;
    let mut length = 0.0;
    let mut prev = t0;
    for t in times.iter().copied().chain(std::iter::once(t_max)) {
        let g = (t - prev) as f64;
        prev = t;
        let excised = cut.is_some_and(|c| g >= c.hours * 3600.0);
        if !excised {
            integral += g * g / 2.0;
        }
        if !excised || cut.is_some_and(|c| c.excision == Excision::NumeratorOnly) {
            length += g;
        }
    }
    if length <= 0.0 {
        return 0.0;
    }
    integral / length / 3600.0
}

/// Fraction of users that ever contact a server in `servers`.
pub fn coverage(trace: &ConnectionTrace, servers: &BTreeSet<String>) -> Result<f64, MetricsError> {
    let users = trace.users();
    if users.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let covered: BTreeSet<&str> =
        trace.records.iter().filter(|c| servers.contains(&c.server)).map(|c| c.user.as_str()).collect();
    Ok(covered.len() as f64 / users.len() as f64)
}

/// Average attack detection time of `user` with respect to `servers`, in
/// hours. The end of the observation counts as a connection.
pub fn aadt(
    trace: &ConnectionTrace,
    user: &str,
    servers: &BTreeSet<String>,
    cut: Option<InactivityCut>,
) -> Result<f64, MetricsError> {
    if !trace.records.iter().any(|c| c.user == user) {
        return Err(MetricsError::UnknownUser(user.to_string()));
    }
    let mut times: Vec<i64> =
        trace.records.iter().filter(|c| c.user == user && servers.contains(&c.server)).map(|c| c.time).collect();
    times.dedup();
    Ok(gap_average(&times, trace.t0, trace.t_max, cut))
}

/// Mean AADT over every user in the trace.
pub fn mean_aadt(trace: &ConnectionTrace, servers: &BTreeSet<String>, cut: Option<InactivityCut>) -> Result<f64, MetricsError> {
    let users = trace.users();
    let mut total = 0.0;
    for u in &users {
        total += aadt(trace, u, servers, cut)?;
    }
    Ok(total / users.len() as f64)
}

/// Average time since `server` last heard from a user in `users`, in hours.
/// Before the first such connection the age counts from `t0`.
pub fn freshness(trace: &ConnectionTrace, server: &str, users: &BTreeSet<String>) -> Result<f64, MetricsError> {
    if !trace.records.iter().any(|c| c.server == server) {
        return Err(MetricsError::UnknownServer(server.to_string()));
    }
    let mut times: Vec<i64> =
        trace.records.iter().filter(|c| c.server == server && users.contains(&c.user)).map(|c| c.time).collect();
    times.dedup();
    Ok(gap_average(&times, trace.t0, trace.t_max, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Half-width of the 95% Student-t interval.
    pub half_width: f64,
    pub samples: Vec<f64>,
}

/// Mean of `samples` with a 95% Student-t half-width. Identical samples give
/// exactly zero width.
pub fn t_interval(samples: &[f64]) -> Estimate {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let identical = samples.windows(2).all(|w| w[0] == w[1]);
    let half_width = if n < 2 || identical {
        0.0
    } else {
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof").inverse_cdf(0.975);
        t * (var / n as f64).sqrt()
    };
    Estimate { mean: if identical { samples[0] } else { mean }, half_width, samples: samples.to_vec() }
}

/// Freshness averaged over `servers` when only a random fraction `p_u` of
/// users runs the protocol, resampled `n_resamples` times.
pub fn freshness_ci<R: Rng + ?Sized>(
    trace: &ConnectionTrace,
    servers: &[String],
    p_u: f64,
    n_resamples: usize,
    rng: &mut R,
) -> Result<Estimate, MetricsError> {
    if !(p_u > 0.0 && p_u <= 1.0) {
        return Err(MetricsError::InvalidFraction(p_u));
    }
    let all: Vec<&str> = trace.users().into_iter().collect();
    if all.is_empty() || servers.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let k = ((p_u * all.len() as f64).ceil() as usize).clamp(1, all.len());
    let mut samples = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples.max(1) {
        let chosen: BTreeSet<String> =
            rand::seq::index::sample(rng, all.len(), k).into_iter().map(|i| all[i].to_string()).collect();
        let mut total = 0.0;
        for s in servers {
            total += freshness(trace, s, &chosen)?;
        }
        samples.push(total / servers.len() as f64);
    }
    Ok(t_interval(&samples))
}

pub const TIER_COUNT: usize = 6;

/// Tier for a server seen by `unique_users` distinct users.
pub fn tier_for(unique_users: usize) -> u8 {
    match unique_users {
        1601.. => 1,
        801..=1600 => 2,
        401..=800 => 3,
        101..=400 => 4,
        100 => 5,
        _ => 6,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TierAssignment {
    pub unique_users: BTreeMap<String, usize>,
    pub tiers: BTreeMap<String, u8>,
}

impl TierAssignment {
    pub fn members(&self, tier: u8) -> Vec<&str> {
        self.tiers.iter().filter(|(_, &t)| t == tier).map(|(s, _)| s.as_str()).collect()
    }

    pub fn counts(&self) -> [usize; TIER_COUNT] {
        let mut out = [0; TIER_COUNT];
        for &t in self.tiers.values() {
            out[t as usize - 1] += 1;
        }
        out
    }
}

pub fn assign_tiers(trace: &ConnectionTrace) -> TierAssignment {
    let mut users: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for c in &trace.records {
        users.entry(&c.server).or_default().insert(&c.user);
    }
    let unique_users: BTreeMap<String, usize> = users.into_iter().map(|(s, u)| (s.to_string(), u.len())).collect();
    let tiers = unique_users.iter().map(|(s, &n)| (s.clone(), tier_for(n))).collect();
    TierAssignment { unique_users, tiers }
}

/// Uniform sample without replacement of `per_tier[i]` servers from tier
/// `i + 1`.
pub fn stratified_sample<R: Rng + ?Sized>(
    tiers: &TierAssignment,
    per_tier: [usize; TIER_COUNT],
    rng: &mut R,
) -> Result<BTreeSet<String>, MetricsError> {
    let mut out = BTreeSet::new();
    for (i, &want) in per_tier.iter().enumerate() {
        let tier = i as u8 + 1;
        let members = tiers.members(tier);
        if want > members.len() {
            return Err(MetricsError::InsufficientTier { tier, requested: want, available: members.len() });
        }
        out.extend(rand::seq::index::sample(rng, members.len(), want).into_iter().map(|j| members[j].to_string()));
    }
    Ok(out)
}

/// What `analyze` computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSpec {
    /// Server set; all servers when absent.
    pub servers: Option<Vec<String>>,
    /// Stratified draw per tier, used when `servers` is absent.
    pub strata: Option<[usize; TIER_COUNT]>,
    pub cut: Option<InactivityCut>,
    pub adoption_fractions: Vec<f64>,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec {
            servers: None,
            strata: None,
            cut: Some(InactivityCut::default()),
            adoption_fractions: vec![0.1, 0.25, 0.5, 1.0],
            resamples: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreshnessRow {
    pub adoption: f64,
    pub mean_hours: f64,
    pub half_width_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub users: usize,
    pub servers: usize,
    pub t0: i64,
    pub t_max: i64,
    pub tier_counts: [usize; TIER_COUNT],
    pub server_set: Vec<String>,
    pub coverage: f64,
    pub mean_aadt_hours: f64,
    pub freshness: Vec<FreshnessRow>,
}

pub fn analyze(trace: &ConnectionTrace, spec: &AnalysisSpec) -> Result<AnalysisReport, MetricsError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let tiers = assign_tiers(trace);
    let set: BTreeSet<String> = match (&spec.servers, spec.strata) {
        (Some(s), _) => s.iter().cloned().collect(),
        (None, Some(strata)) => stratified_sample(&tiers, strata, &mut rng)?,
        (None, None) => trace.servers().into_iter().map(String::from).collect(),
    };
    for s in &set {
        if !trace.records.iter().any(|c| &c.server == s) {
            return Err(MetricsError::UnknownServer(s.clone()));
        }
    }
    let listed: Vec<String> = set.iter().cloned().collect();
    let mut freshness = Vec::new();
    for &p in &spec.adoption_fractions {
        let e = freshness_ci(trace, &listed, p, spec.resamples, &mut rng)?;
        freshness.push(FreshnessRow { adoption: p, mean_hours: e.mean, half_width_hours: e.half_width });
    }
    Ok(AnalysisReport {
        users: trace.users().len(),
        servers: trace.servers().len(),
        t0: trace.t0,
        t_max: trace.t_max,
        tier_counts: tiers.counts(),
        coverage: coverage(trace, &set)?,
        mean_aadt_hours: mean_aadt(trace, &set, spec.cut)?,
        server_set: listed,
        freshness,
    })
}

impl AnalysisReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "users {}  servers {}  span {:.2} h", self.users, self.servers, (self.t_max - self.t0) as f64 / 3600.0);
        let _ = writeln!(s, "tiers   {}", self.tier_counts.map(|c| format!("{c:>6}")).join(""));
        let _ = writeln!(s, "server set ({}): coverage {:.4}  mean AADT {:.3} h", self.server_set.len(), self.coverage, self.mean_aadt_hours);
        let _ = writeln!(s, "{:>8}  {:>12}  {:>10}", "p_u", "freshness h", "+/- 95%");
        for row in &self.freshness {
            let _ = writeln!(s, "{:>8.3}  {:>12.3}  {:>10.3}", row.adoption, row.mean_hours, row.half_width_hours);
        }
        s
    }
}
