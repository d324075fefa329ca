//! User connection behaviour: a two-level diurnal intensity and
//! tier-weighted server popularity.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::metrics::{Connection, ConnectionTrace, MetricsError, TIER_COUNT};

/// Step-function intensity over 15-minute slots of a 24-hour day, with a
/// quiet period (02:00 to 07:30 by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct DiurnalProfile {
    pub slot_minutes: u32,
    pub quiet_start_minutes: u32,
    pub quiet_end_minutes: u32,
    pub active_intensity: f64,
    pub quiet_intensity: f64,
}

impl Default for DiurnalProfile {
    fn default() -> Self {
        DiurnalProfile {
            slot_minutes: 15,
            quiet_start_minutes: 2 * 60,
            quiet_end_minutes: 7 * 60 + 30,
            active_intensity: 1.0,
            quiet_intensity: 0.1,
        }
    }
}

impl DiurnalProfile {
    /// Relative intensity at `t_minutes` since midnight of day zero.
    pub fn intensity(&self, t_minutes: f64) -> f64 {
        let day = t_minutes.rem_euclid(1440.0);
        let slot = (day / self.slot_minutes as f64).floor() * self.slot_minutes as f64;
        if slot >= self.quiet_start_minutes as f64 && slot < self.quiet_end_minutes as f64 {
            self.quiet_intensity
        } else {
            self.active_intensity
        }
    }

    pub fn max_intensity(&self) -> f64 {
        self.active_intensity.max(self.quiet_intensity)
    }

    /// Next arrival after `t` of a Poisson process with rate
    /// `per_minute * intensity(t)`, by thinning. `None` if the rate is zero.
    pub fn next_arrival<R: Rng + ?Sized>(&self, t: f64, per_minute: f64, rng: &mut R) -> Option<f64> {
        let peak = per_minute * self.max_intensity();
        if peak <= 0.0 {
            return None;
        }
        let gaps = Exp::new(peak).expect("positive rate");
        let mut t = t;
        loop {
            t += gaps.sample(rng);
            if rng.random::<f64>() * self.max_intensity() < self.intensity(t) {
                return Some(t);
            }
        }
    }
}

/// Relative popularity of a server in each tier.
pub const DEFAULT_TIER_WEIGHTS: [f64; TIER_COUNT] = [2400.0, 1200.0, 600.0, 250.0, 100.0, 50.0];

/// Server ids `s0, s1, ...` grouped by tier, plus a sampler over them.
#[derive(Debug, Clone)]
pub struct ServerPopulation {
    pub ids: Vec<String>,
    pub tiers: Vec<u8>,
    sampler: WeightedIndex<f64>,
}

impl ServerPopulation {
    pub fn new(tier_sizes: &[usize; TIER_COUNT], tier_weights: &[f64; TIER_COUNT]) -> Option<Self> {
        let mut ids = Vec::new();
        let mut tiers = Vec::new();
        let mut weights = Vec::new();
        for (i, (&n, &w)) in tier_sizes.iter().zip(tier_weights).enumerate() {
            for _ in 0..n {
                ids.push(format!("s{}", ids.len()));
                tiers.push(i as u8 + 1);
                weights.push(w);
            }
        }
        let sampler = WeightedIndex::new(&weights).ok()?;
        Some(ServerPopulation { ids, tiers, sampler })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct SyntheticTraceConfig {
    pub n_users: usize,
    pub tier_sizes: [usize; TIER_COUNT],
    pub tier_weights: [f64; TIER_COUNT],
    pub connections_per_active_hour: f64,
    pub duration_hours: f64,
    pub profile: DiurnalProfile,
}

impl Default for SyntheticTraceConfig {
    fn default() -> Self {
        SyntheticTraceConfig {
            n_users: 50,
            tier_sizes: [1, 2, 3, 4, 2, 8],
            tier_weights: DEFAULT_TIER_WEIGHTS,
            connections_per_active_hour: 3.0,
            duration_hours: 48.0,
            profile: DiurnalProfile::default(),
        }
    }
}

/// Connection trace over `[0, duration]` with per-user diurnal arrivals and
/// popularity-weighted servers.
pub fn synthetic_trace<R: Rng + ?Sized>(cfg: &SyntheticTraceConfig, rng: &mut R) -> Result<ConnectionTrace, MetricsError> {
    let servers = ServerPopulation::new(&cfg.tier_sizes, &cfg.tier_weights).ok_or(MetricsError::EmptyTrace)?;
    let end = cfg.duration_hours * 60.0;
    let mut records = Vec::new();
    for u in 0..cfg.n_users {
        let mut t = 0.0;
        while let Some(next) = cfg.profile.next_arrival(t, cfg.connections_per_active_hour / 60.0, rng) {
            if next > end {
                break;
            }
            t = next;
            let s = servers.pick(rng);
            records.push(Connection { time: (t * 60.0).round() as i64, user: format!("u{u}"), server: servers.ids[s].clone() });
        }
    }
    ConnectionTrace::with_bounds(records, 0, (end * 60.0).round() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quiet_window() {
        let p = DiurnalProfile::default();
        assert_eq!(p.intensity(60.0), 1.0);
        assert_eq!(p.intensity(120.0), 0.1);
        assert_eq!(p.intensity(449.0), 0.1);
        assert_eq!(p.intensity(450.0), 1.0);
        assert_eq!(p.intensity(1440.0 + 200.0), 0.1);
    }

    #[test]
    fn thinning_rate() {
        let p = DiurnalProfile::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut t, mut quiet, mut active) = (0.0, 0usize, 0usize);
        while t < 1440.0 * 200.0 {
            t = p.next_arrival(t, 0.5, &mut rng).unwrap();
            if p.intensity(t) < 1.0 {
                quiet += 1;
            } else {
                active += 1;
            }
        }
        // Quiet spans 330 of 1440 minutes at a tenth of the rate.
        let expect_ratio = 0.1 * 330.0 / 1110.0;
        let ratio = quiet as f64 / active as f64;
        assert!((ratio - expect_ratio).abs() < 0.1 * expect_ratio, "{ratio}");
    }

    #[test]
    fn synthetic_is_seeded() {
        let cfg = SyntheticTraceConfig::default();
        let a = synthetic_trace(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = synthetic_trace(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.len() > 1000);
        assert_eq!(a.t0, 0);
    }
}
