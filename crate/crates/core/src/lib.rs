//! Eclipse-attack detection for Bitcoin light clients.
//!
//! Two independent detectors live here:
//!
//! * [`alerts`]: a timestamp monitor that flags block sequences which are
//!   improbably slow under a Poisson model of block creation.
//! * [`gossip`]: a header-gossip protocol that piggybacks compact header
//!   segments on HTTP traffic so an eclipsed client learns of a stronger chain.
//!
//! [`sim`] drives both in virtual time and [`metrics`] evaluates connection
//! traces for coverage, detection time and server freshness.

pub mod alerts;
pub mod chainview;
pub mod gossip;
pub mod headers;
pub mod metrics;
pub mod sim;

pub use chainview::{HeaderRange, HeaderWindow, IndexedHeader, Strongest};
pub use headers::{BlockHash, BlockHeader, CompactChainSegment, Target};
