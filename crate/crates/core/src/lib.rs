//! Ring-road traffic simulation with utility-maximizing driving agents, and a
//! policy-search layer that tunes the ideal speed of connected automated
//! vehicles (CAVs) to trade throughput against speed oscillation.
//!
//! Module map:
//!
//! * [`behavior`]: per-agent anticipation, utility components and the
//!   Boltzmann-averaged action.
//! * [`dynamics`]: one synchronous step of the whole ring (AR(1) acceleration,
//!   Gaussian state noise, periodic wrap).
//! * [`scenario`]: fleet construction, the braking kick, CAV activation and
//!   full episodes.
//! * [`metrics`]: average speed, speed range, long-run statistics, phases.
//! * [`mechanism`]: CAV placement, κ sweeps, response-curve smoothing,
//!   the scalarized objective, optimal κ and the efficient frontier.
//! * [`io`]: delimited-text writers for trajectories, sweep summaries and
//!   frontiers.

pub mod behavior;
pub mod dynamics;
mod error;
pub mod io;
pub mod mechanism;
pub mod metrics;
pub mod params;
pub mod scenario;

pub use behavior::{AnticipatedPath, DecisionState};
pub use dynamics::{CollisionEvent, KinematicState, NoiseStreams, TrafficState};
pub use error::{Error, Result};

pub use mechanism::{ControlPolicy, ResponseCurves, SweepPlan, SweepResult};
pub use metrics::{EpisodeStats, Phase};
pub use params::AgentParams;
pub use scenario::{EpisodeConfig, KickSchedule, TrajectoryRecord};
