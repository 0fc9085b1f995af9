//! Single-agent decision making: a constant-action anticipation rollout, the
//! three transformed utility components, and the Boltzmann-averaged action.
//!
//! The ego agent assumes it holds action `u` for the whole horizon while its
//! leader holds zero action. Every per-period utility evaluated at the
//! anticipated state `ŝ_h` also uses the one-step extrapolation
//! `x̂_{h+1} = x̂_h + v̂_h·dt`, `v̂_{h+1} = v̂_h + â_h·dt`.

use crate::dynamics::{wrap_position, KinematicState};
use crate::params::AgentParams;

/// What driver `i` observes: itself and the vehicle directly ahead on the ring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionState {
    pub ego: KinematicState,
    pub leader: KinematicState,
    pub ego_length: f64,
    pub leader_length: f64,
    pub circumference: f64,
}

impl DecisionState {
    /// Centre-to-centre distance from ego forward to the leader, in `(0, C]`.
    ///
    /// Coincident positions are read as a full lap, which is what a lone
    /// vehicle (its own leader) sees.
    pub fn separation(&self) -> f64 {
        let d = wrap_position(self.leader.x - self.ego.x, self.circumference);
        if d == 0.0 {
            self.circumference
        } else {
            d
        }
    }

    pub fn bumper_gap(&self) -> f64 {
        self.separation() - 0.5 * (self.ego_length + self.leader_length)
    }
}

/// Mental rollout of ego and leader over `horizon + 1` states.
#[derive(Debug, Clone, PartialEq)]
pub struct AnticipatedPath {
    pub ego_states: Vec<KinematicState>,
    pub leader_states: Vec<KinematicState>,
    /// Period length the path was built with.
    pub dt: f64,
    /// Forward distance from ego to leader at `h = 0` (centre to centre).
    pub separation: f64,
    pub ego_length: f64,
    pub leader_length: f64,
}

impl AnticipatedPath {
    pub fn len(&self) -> usize {
        self.ego_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ego_states.is_empty()
    }
}

/// One-step extrapolation from `ŝ_h`: returns (distance travelled since
/// `h = 0` up to `x̂_{h+1}`, `v̂_{h+1}`).
fn extrapolate(states: &[KinematicState], h: usize, dt: f64) -> (f64, f64) {
    let travelled: f64 = states[..=h].iter().map(|s| s.v * dt).sum();
    let s = states[h];
    (travelled, s.v + s.a * dt)
}

fn rollout(start: KinematicState, action: f64, steps: usize, dt: f64, c: f64) -> Vec<KinematicState> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut s = start;
    out.push(s);
    for _ in 0..steps {
        s = KinematicState {
            x: wrap_position(s.x + s.v * dt, c),
            v: s.v + s.a * dt,
            a: action,
        };
        out.push(s);
    }
    out
}

/// Anticipated states `ŝ_0 … ŝ_H` for ego (constant action `u`) and leader
/// (zero action). `ŝ_0` is the observed state, so `â_0` is the current
/// realized acceleration.
pub fn anticipate(state: &DecisionState, u: f64, params: &AgentParams) -> AnticipatedPath {
    let c = state.circumference;
    AnticipatedPath {
        ego_states: rollout(state.ego, u, params.horizon, params.dt, c),
        leader_states: rollout(state.leader, 0.0, params.horizon, params.dt, c),
        dt: params.dt,
        separation: state.separation(),
        ego_length: state.ego_length,
        leader_length: state.leader_length,
    }
}

/// Speed the driver expects right after one period of action `u`: `v̂_1 + u·dt`.
fn first_speed(path: &AnticipatedPath, u: f64) -> f64 {
    let (_, v1) = extrapolate(&path.ego_states, 0, path.dt);
    v1 + u * path.dt
}

/// Forward reward, only the `h = 0` element counts.
pub fn forward_reward(path: &AnticipatedPath, u: f64, params: &AgentParams) -> f64 {
    let z = (first_speed(path, u) - params.v_star) / (params.kappa1 * params.v_star);
    (-z * z).exp()
}

/// Backward-motion penalty, only the `h = 0` element counts.
pub fn backward_penalty(path: &AnticipatedPath, u: f64, params: &AgentParams) -> f64 {
    (-params.kappa2_v * (first_speed(path, u) + params.kappa2_0)).exp()
}

/// `F(x) = exp(-x² - 2x)`; equals 1 at 0 and decays for x > 0.
pub fn risk_shape(x: f64) -> f64 {
    underflowing_exp(-x * x - 2.0 * x)
}

/// `exp` that skips the call where the result is exactly zero anyway.
#[inline]
fn underflowing_exp(x: f64) -> f64 {
    if x < -746.0 {
        0.0
    } else {
        x.exp()
    }
}

/// Per-period front-collision risk at anticipation step `h`.
pub fn collision_risk_at(path: &AnticipatedPath, u: f64, h: usize, params: &AgentParams) -> f64 {
    let dt = path.dt;
    let (ego_run, ego_v) = extrapolate(&path.ego_states, h, dt);
    let (lead_run, lead_v) = extrapolate(&path.leader_states, h, dt);
    // Positions inside the gap carry one more v̂_{h+1}·dt of look-ahead.
    let gap = path.separation + (lead_run + lead_v * dt) - (ego_run + ego_v * dt)
        - 0.5 * (path.ego_length + path.leader_length);
    if gap <= 0.0 {
        return 1.0;
    }
    let ego_speed = ego_v + u * dt;
    let scale = params.kappa3_c
        + params.kappa3_v * ego_speed.abs()
        + params.kappa3_d * (ego_speed - lead_v).max(0.0);
    risk_shape(gap / scale)
}

/// Front-collision penalty: worst case over the horizon.
pub fn collision_penalty(path: &AnticipatedPath, u: f64, params: &AgentParams) -> f64 {
    (0..path.len())
        .map(|h| collision_risk_at(path, u, h, params))
        .fold(0.0, f64::max)
}

/// Weighted sum of the three transformed components for action `u`.
pub fn effective_utility(state: &DecisionState, u: f64, params: &AgentParams) -> f64 {
    let path = anticipate(state, u, params);
    params.w1 * forward_reward(&path, u, params)
        + params.w2 * backward_penalty(&path, u, params)
        + params.w3 * collision_penalty(&path, u, params)
}

/// Effective utility at every point of the action grid.
///
/// Same values as calling [`effective_utility`] per action, without building
/// paths: the leader rollout is shared by all actions, and since the risk
/// shape is decreasing the worst horizon step is the one with the smallest
/// gap-to-scale ratio.
pub fn grid_utilities(state: &DecisionState, params: &AgentParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.grid_points);
    fill_grid_utilities(state, params, &mut out);
    out
}

fn fill_grid_utilities(state: &DecisionState, p: &AgentParams, out: &mut Vec<f64>) {
    let dt = p.dt;
    let steps = p.horizon + 1;
    let head = state.separation() - 0.5 * (state.ego_length + state.leader_length);

    // Leader: look-ahead position offset and v̂_{h+1} for every h.
    let mut lead = Vec::with_capacity(steps);
    let (mut run, mut v, mut a) = (0.0, state.leader.v, state.leader.a);
    for _ in 0..steps {
        run += v * dt;
        let next_v = v + a * dt;
        lead.push((run + next_v * dt, next_v));
        v = next_v;
        a = 0.0;
    }

    let ego = state.ego;
    let v1 = ego.v + ego.a * dt;
    out.clear();
    for u in p.action_grid() {
        let speed = v1 + u * dt;
        let z = (speed - p.v_star) / (p.kappa1 * p.v_star);
        let reward = (-z * z).exp();
        let backward = underflowing_exp(-p.kappa2_v * (speed + p.kappa2_0));

        let mut risk = 0.0;
        let mut min_ratio = f64::INFINITY;
        let (mut run, mut v, mut a) = (0.0, ego.v, ego.a);
        for &(lead_pos, lead_v) in &lead {
            run += v * dt;
            let next_v = v + a * dt;
            let gap = head + lead_pos - (run + next_v * dt);
            if gap <= 0.0 {
                risk = 1.0;
                break;
            }
            let es = next_v + u * dt;
            let scale = p.kappa3_c + p.kappa3_v * es.abs() + p.kappa3_d * (es - lead_v).max(0.0);
            min_ratio = min_ratio.min(gap / scale);
            v = next_v;
            a = u;
        }
        if risk < 1.0 && min_ratio < 28.0 {
            risk = risk_shape(min_ratio);
        }
        out.push(p.w1 * reward + p.w2 * backward + p.w3 * risk);
    }
}

/// Softmax-weighted mean of `actions` under weights `exp(λ·utility)`.
///
/// The largest exponent is subtracted first; with λ in the hundreds the raw
/// exponents overflow.
pub fn boltzmann_average(actions: &[f64], utilities: &[f64], lambda: f64) -> f64 {
    debug_assert_eq!(actions.len(), utilities.len());
    let peak = utilities
        .iter()
        .map(|u| lambda * u)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &u) in actions.iter().zip(utilities) {
        let w = underflowing_exp(lambda * u - peak);
        num += a * w;
        den += w;
    }
    num / den
}

/// Boltzmann-regularized best response over the action grid.
pub fn boltzmann_action(state: &DecisionState, params: &AgentParams) -> f64 {
    let utils = grid_utilities(state, params);
    boltzmann_average(&params.action_grid(), &utils, params.lambda).clamp(params.u_min, params.u_max)
}
