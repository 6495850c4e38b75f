//! Multi-resource RNIC simulator with a per-host isolation daemon.
//!
//! The control math is generic over [`scalar::Scalar`]; the simulator runs it
//! on integer bytes/s and tests cross-check it against exact rationals.

pub mod daemon;
pub mod engine;
pub mod metrics;
pub mod rnic;
pub mod scalar;
pub mod scenario;
pub mod shaper;
pub mod sim;
pub mod sketch;

use num_rational::Ratio;

/// Bytes per second.
pub type Rate = u64;
/// Exact rate used to cross-check integer rounding.
pub type ExactRate = Ratio<u128>;
/// Fraction of a host's line rate granted to one remote consumer.
pub type Share = Ratio<u32>;
pub type HostDaemon = daemon::Daemon<Rate>;
pub type HostState = daemon::DaemonState<Rate>;
pub type ExactState = daemon::DaemonState<ExactRate>;

pub use engine::{SimRng, SimTime};
