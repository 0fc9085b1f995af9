//! Synchronous evolution of the whole ring.
//!
//! Every agent picks its Boltzmann action from the same time-`t` snapshot,
//! then all vehicles move at once:
//!
//! ```text
//! x' = x + v·dt + μˣ  (mod C)
//! v' = v + a·dt + μᵛ
//! a' = γ·a + (ū_t − γ·ū_{t−1}) + μᵃ
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::behavior::{boltzmann_action, DecisionState};
use crate::error::{Error, Result};
use crate::params::AgentParams;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KinematicState {
    /// Position along the ring (m), in `[0, C)`.
    pub x: f64,
    /// Velocity (m/s). Noise can push it slightly negative.
    pub v: f64,
    /// Realized acceleration (m/s²).
    pub a: f64,
}

/// `x mod C` in `[0, C)`.
pub fn wrap_position(x: f64, circumference: f64) -> f64 {
    let r = x.rem_euclid(circumference);
    // rem_euclid of a tiny negative number rounds up to C itself.
    if r >= circumference {
        0.0
    } else {
        r
    }
}

/// Bumper-to-bumper distance from `follower` forward to `leader`. Negative
/// means the vehicles overlap.
pub fn bumper_gap(
    follower: &KinematicState,
    leader: &KinematicState,
    follower_length: f64,
    leader_length: f64,
    circumference: f64,
) -> f64 {
    wrap_position(leader.x - follower.x, circumference) - 0.5 * (follower_length + leader_length)
}

/// Snapshot of every vehicle on the ring. Vehicle `i` follows vehicle
/// `(i + 1) % N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState {
    pub t: usize,
    pub states: Vec<KinematicState>,
    /// Action each agent applied in the previous step (`ū_{t−1}`).
    pub prev_actions: Vec<f64>,
    pub circumference: f64,
}

impl TrafficState {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn leader_of(&self, i: usize) -> usize {
        (i + 1) % self.states.len()
    }

    pub fn decision_state(&self, i: usize, fleet: &[AgentParams]) -> DecisionState {
        let j = self.leader_of(i);
        DecisionState {
            ego: self.states[i],
            leader: self.states[j],
            ego_length: fleet[i].length,
            leader_length: fleet[j].length,
            circumference: self.circumference,
        }
    }

    /// Bumper gap between vehicle `i` and its leader. A lone vehicle sees
    /// the whole ring ahead of itself.
    pub fn gap_ahead(&self, i: usize, fleet: &[AgentParams]) -> f64 {
        self.decision_state(i, fleet).bumper_gap()
    }
}

/// Two vehicles overlapping after a step. Logged, never fatal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub step: usize,
    pub follower: usize,
    pub leader: usize,
    pub gap: f64,
}

const CHANNELS: u64 = 3;

/// Independent Gaussian streams, one per (agent, channel), all derived from
/// a single episode seed. Drawing order inside one stream never depends on
/// other agents, so trajectories do not depend on evaluation order.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    streams: Vec<[ChaCha8Rng; 3]>,
}

impl NoiseStreams {
    pub fn new(seed: u64, agents: usize) -> Self {
        let streams = (0..agents as u64)
            .map(|i| {
                std::array::from_fn(|c| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i * CHANNELS + c as u64);
                    rng
                })
            })
            .collect();
        NoiseStreams { streams }
    }

    /// Standard-normal draws for (x, v, a) of agent `i`.
    fn draw(&mut self, i: usize) -> [f64; 3] {
        let s = &mut self.streams[i];
        [
            StandardNormal.sample(&mut s[0]),
            StandardNormal.sample(&mut s[1]),
            StandardNormal.sample(&mut s[2]),
        ]
    }
}

/// Every agent's Boltzmann action for the given snapshot.
pub fn decide_all(state: &TrafficState, fleet: &[AgentParams]) -> Vec<f64> {
    (0..state.len())
        .map(|i| boltzmann_action(&state.decision_state(i, fleet), &fleet[i]))
        .collect()
}

/// Result of one synchronous step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next: TrafficState,
    /// Actions applied during the step, overrides included.
    pub applied: Vec<f64>,
    pub collisions: Vec<CollisionEvent>,
}

/// Advances the ring by one period. `overrides` maps a 0-based agent index
/// to a forced action that replaces its own choice.
pub fn step(
    state: &TrafficState,
    fleet: &[AgentParams],
    overrides: &BTreeMap<usize, f64>,
    noise: &mut NoiseStreams,
) -> Result<StepOutcome> {
    let n = state.len();
    if fleet.len() != n || state.prev_actions.len() != n {
        return Err(Error::Config(format!(
            "fleet of {} agents does not match state of {} vehicles",
            fleet.len(),
            n
        )));
    }
    if let Some((&i, _)) = overrides.iter().find(|(&i, _)| i >= n) {
        return Err(Error::Config(format!("override for agent {i} but only {n} agents")));
    }

    let mut applied = decide_all(state, fleet);
    for (&i, &u) in overrides {
        applied[i] = u;
    }

    let c = state.circumference;
    let states = (0..n)
        .map(|i| {
            let p = &fleet[i];
            let s = state.states[i];
            let [zx, zv, za] = noise.draw(i);
            KinematicState {
                x: wrap_position(s.x + s.v * p.dt + p.sigma_x * zx, c),
                v: s.v + s.a * p.dt + p.sigma_v * zv,
                a: p.gamma * s.a + (applied[i] - p.gamma * state.prev_actions[i]) + p.sigma_a * za,
            }
        })
        .collect();

    let next = TrafficState {
        t: state.t + 1,
        states,
        prev_actions: applied.clone(),
        circumference: c,
    };

    let collisions = if n > 1 {
        (0..n)
            .filter_map(|i| {
                let gap = next.gap_ahead(i, fleet);
                (gap <= 0.0).then(|| CollisionEvent {
                    step: next.t,
                    follower: i,
                    leader: next.leader_of(i),
                    gap,
                })
            })
            .collect()
    } else {
        Vec::new()
    };
    for ev in &collisions {
        log::warn!(
            "collision at step {}: vehicle {} overlaps leader {} (gap {:.3} m)",
            ev.step,
            ev.follower + 1,
            ev.leader + 1,
            ev.gap
        );
    }

    Ok(StepOutcome {
        next,
        applied,
        collisions,
    })
}
