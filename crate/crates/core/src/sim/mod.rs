//! Discrete-event simulation of eclipse attacks against light clients.

pub mod chain;
pub mod scenario;
pub mod traffic;

pub use scenario::{
    detection_histogram, export_trace, run_batch, run_scenario, summarize, BatchSummary, DetectionSource, ScenarioConfig,
    ScenarioResult, SimError, SimEvent, SimEventKind, TimestampMode, UserReport,
};
