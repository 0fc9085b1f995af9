//! The ring-road experiment protocol: a heterogeneous fleet starts evenly
//! spaced and at rest, one vehicle brakes briefly to seed a disturbance, and
//! designated vehicles turn into CAVs whose ideal speed is set to `kappa`.
//!
//! Vehicle numbers in [`EpisodeConfig`] (`cav_indices`, `kick.vehicle`) are
//! 1-based, matching trajectory files. Everything in [`crate::dynamics`] is
//! 0-based.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{step, CollisionEvent, KinematicState, NoiseStreams, TrafficState};
use crate::error::{Error, Result};
use crate::params::AgentParams;

/// Slack for comparing times built from `step · dt` against schedule times.
const TIME_EPS: f64 = 1e-9;

/// Scheduled braking of one vehicle to seed a wave.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KickSchedule {
    pub enabled: bool,
    /// 1-based vehicle number.
    pub vehicle: usize,
    pub start_s: f64,
    pub duration_s: f64,
    /// Forced action while active (m/s²).
    pub decel: f64,
}

impl Default for KickSchedule {
    fn default() -> Self {
        KickSchedule {
            enabled: true,
            vehicle: 1,
            start_s: 10.0,
            duration_s: 6.0,
            decel: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n: usize,
    pub circumference: f64,
    pub steps: usize,
    pub dt: f64,
    pub kick: KickSchedule,
    /// 1-based vehicle numbers that become CAVs.
    pub cav_indices: Vec<usize>,
    pub cav_on_time: f64,
    /// CAV ideal speed (m/s). Required when `cav_indices` is non-empty.
    pub kappa: Option<f64>,
    pub heterogeneity_seed: u64,
    /// Relative standard deviation of the per-agent preference factors.
    pub heterogeneity: f64,
    pub noise_seed: u64,
    pub measure_window: (f64, f64),
    /// Fleet-average agent; `dt` is overwritten by the episode's `dt`.
    pub agent: AgentParams,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n: 30,
            circumference: 314.0,
            steps: 3000,
            dt: 1.0 / 3.0,
            kick: KickSchedule::default(),
            cav_indices: Vec::new(),
            cav_on_time: 50.0,
            kappa: None,
            heterogeneity_seed: 0,
            heterogeneity: 0.05,
            noise_seed: 0,
            measure_window: (200.0, 1000.0),
            agent: AgentParams::calibrated(),
        }
    }
}

impl EpisodeConfig {
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    /// Turns the given vehicles into CAVs with ideal speed `kappa`.
    pub fn with_cavs(mut self, cav_indices: Vec<usize>, kappa: f64) -> Self {
        self.cav_indices = cav_indices;
        self.kappa = Some(kappa);
        self
    }

    pub fn without_kick(mut self) -> Self {
        self.kick.enabled = false;
        self
    }

    pub fn duration_s(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// Base agent with the episode's period length.
    pub fn base_agent(&self) -> AgentParams {
        AgentParams {
            dt: self.dt,
            ..self.agent
        }
    }

    /// First step at which CAVs use `kappa`.
    pub fn cav_on_step(&self) -> usize {
        (self.cav_on_time / self.dt - TIME_EPS).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n == 0 {
            return bad("need at least one vehicle".into());
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        let base = self.base_agent();
        base.validate()?;
        if !(self.circumference > self.n as f64 * base.length) {
            return bad(format!(
                "circumference {} m cannot hold {} vehicles of length {} m",
                self.circumference, self.n, base.length
            ));
        }
        if let Some(&i) = self.cav_indices.iter().find(|&&i| i == 0 || i > self.n) {
            return bad(format!("CAV index {i} outside 1..={}", self.n));
        }
        if !self.cav_indices.is_empty() {
            match self.kappa {
                Some(k) if k > 0.0 && k.is_finite() => {}
                Some(k) => return bad(format!("kappa must be positive, got {k}")),
                None => return bad("CAVs configured without kappa".into()),
            }
        }
        if self.kick.enabled {
            let kick = &self.kick;
            if kick.vehicle == 0 || kick.vehicle > self.n {
                return bad(format!("kicked vehicle {} outside 1..={}", kick.vehicle, self.n));
            }
            if kick.duration_s < 0.0 {
                return bad("kick duration must be non-negative".into());
            }
        }
        if !(0.0..0.3).contains(&self.heterogeneity) {
            return bad(format!("heterogeneity level {} outside [0, 0.3)", self.heterogeneity));
        }
        let (lo, hi) = self.measure_window;
        if !(lo <= hi) || lo < 0.0 {
            return bad(format!("measure window [{lo}, {hi}] is not an interval"));
        }
        Ok(())
    }
}

/// One multiplicative preference factor `1 + ε`, `ε ~ N(0, level²)` cut at 3σ.
fn preference_factor(rng: &mut ChaCha8Rng, level: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return 1.0 + level * z;
        }
    }
}

/// Fleet with per-agent variation on `v_star`, `kappa3_v` and `sigma_a`.
pub fn build_fleet(base: &AgentParams, n: usize, heterogeneity_seed: u64, level: f64) -> Vec<AgentParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(heterogeneity_seed);
    (0..n)
        .map(|_| {
            let v = preference_factor(&mut rng, level);
            let kv = preference_factor(&mut rng, level);
            let sa = preference_factor(&mut rng, level);
            AgentParams {
                v_star: base.v_star * v,
                kappa3_v: base.kappa3_v * kv,
                sigma_a: base.sigma_a * sa,
                ..*base
            }
        })
        .collect()
}

/// Evenly spaced vehicles at rest with no action history.
pub fn initialize(config: &EpisodeConfig) -> TrafficState {
    let n = config.n;
    let c = config.circumference;
    TrafficState {
        t: 0,
        states: (0..n)
            .map(|i| KinematicState {
                x: i as f64 * c / n as f64,
                v: 0.0,
                a: 0.0,
            })
            .collect(),
        prev_actions: vec![0.0; n],
        circumference: c,
    }
}

/// Forced action for the kicked vehicle at time `t_s`.
///
/// Inside the kick window the vehicle brakes while it still moves forward
/// and holds zero action otherwise; outside the window there is no override.
pub fn kick_override(config: &EpisodeConfig, t_s: f64, v_kicked: f64) -> Option<f64> {
    let kick = &config.kick;
    if !kick.enabled {
        return None;
    }
    let start = kick.start_s - TIME_EPS;
    let end = kick.start_s + kick.duration_s - TIME_EPS;
    if t_s >= start && t_s < end {
        Some(if v_kicked > 0.0 { kick.decel } else { 0.0 })
    } else {
        None
    }
}

/// Fleet as it runs once the CAVs are switched on: each CAV's ideal speed is
/// exactly `kappa`, everything else untouched.
pub fn activate_cav(fleet: &[AgentParams], config: &EpisodeConfig) -> Result<Vec<AgentParams>> {
    if config.cav_indices.is_empty() {
        return Ok(fleet.to_vec());
    }
    let kappa = config
        .kappa
        .ok_or_else(|| Error::Config("CAVs configured without kappa".into()))?;
    let mut out = fleet.to_vec();
    for &i in &config.cav_indices {
        let agent = out
            .get_mut(i.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("CAV index {i} outside 1..={}", fleet.len())))?;
        agent.v_star = kappa;
    }
    Ok(out)
}

/// Pre-step snapshot: the state at step `t` and the actions applied from it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub states: Vec<KinematicState>,
    pub applied: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub config: EpisodeConfig,
    pub fleet: Vec<AgentParams>,
    /// One entry per executed step, `t = 0 .. steps`.
    pub steps: Vec<StepRecord>,
    /// State after the last step (the initial state when `steps == 0`).
    pub final_state: TrafficState,
    pub collisions: Vec<CollisionEvent>,
}

impl TrajectoryRecord {
    /// Every recorded state including the final one, as `(step, states)`.
    pub fn states(&self) -> impl Iterator<Item = (usize, &[KinematicState])> {
        self.steps
            .iter()
            .map(|s| (s.t, s.states.as_slice()))
            .chain(std::iter::once((self.final_state.t, self.final_state.states.as_slice())))
    }
}

/// Runs the protocol with a given (already heterogeneous) fleet, calling
/// `observe` with every pre-step state and the actions applied from it.
/// Returns the final state and all collision events.
pub fn simulate_with<F>(
    config: &EpisodeConfig,
    fleet: &[AgentParams],
    mut observe: F,
) -> Result<(TrafficState, Vec<CollisionEvent>)>
where
    F: FnMut(&TrafficState, &[f64]),
{
    config.validate()?;
    if fleet.len() != config.n {
        return Err(Error::Config(format!(
            "fleet has {} agents, config asks for {}",
            fleet.len(),
            config.n
        )));
    }
    let human: Vec<AgentParams> = fleet.iter().map(|p| AgentParams { dt: config.dt, ..*p }).collect();
    let controlled = activate_cav(&human, config)?;
    let on_step = config.cav_on_step();

    let mut noise = NoiseStreams::new(config.noise_seed, config.n);
    let mut state = initialize(config);
    let mut collisions = Vec::new();
    let mut overrides = BTreeMap::new();

    for t in 0..config.steps {
        overrides.clear();
        if config.kick.enabled {
            let i = config.kick.vehicle - 1;
            if let Some(u) = kick_override(config, t as f64 * config.dt, state.states[i].v) {
                overrides.insert(i, u);
            }
        }
        let agents = if t >= on_step { &controlled } else { &human };
        let out = step(&state, agents, &overrides, &mut noise)?;
        observe(&state, &out.applied);
        collisions.extend(out.collisions);
        state = out.next;
    }
    Ok((state, collisions))
}

/// Builds the fleet from the config's heterogeneity seed and runs one
/// episode, keeping the full trajectory.
pub fn run_episode(config: &EpisodeConfig) -> Result<TrajectoryRecord> {
    config.validate()?;
    let fleet = build_fleet(&config.base_agent(), config.n, config.heterogeneity_seed, config.heterogeneity);
    run_episode_with_fleet(config, fleet)
}

pub fn run_episode_with_fleet(config: &EpisodeConfig, fleet: Vec<AgentParams>) -> Result<TrajectoryRecord> {
    let mut steps = Vec::with_capacity(config.steps);
    let (final_state, collisions) = simulate_with(config, &fleet, |s, applied| {
        steps.push(StepRecord {
            t: s.t,
            states: s.states.clone(),
            applied: applied.to_vec(),
        })
    })?;
    Ok(TrajectoryRecord {
        config: config.clone(),
        fleet,
        steps,
        final_state,
        collisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_heterogeneity_reproduces_base() {
        let base = AgentParams::calibrated();
        let fleet = build_fleet(&base, 12, 7, 0.0);
        assert!(fleet.iter().all(|p| *p == base));
    }

    #[test]
    fn fleet_is_seed_deterministic() {
        let base = AgentParams::calibrated();
        assert_eq!(build_fleet(&base, 30, 5, 0.05), build_fleet(&base, 30, 5, 0.05));
        assert_ne!(build_fleet(&base, 30, 5, 0.05), build_fleet(&base, 30, 6, 0.05));
    }

    #[test]
    fn heterogeneity_touches_only_three_parameters() {
        let base = AgentParams::calibrated();
        for p in build_fleet(&base, 50, 1, 0.05) {
            let restored = AgentParams {
                v_star: base.v_star,
                kappa3_v: base.kappa3_v,
                sigma_a: base.sigma_a,
                ..p
            };
            assert_eq!(restored, base);
            for (val, b) in [(p.v_star, base.v_star), (p.kappa3_v, base.kappa3_v), (p.sigma_a, base.sigma_a)] {
                assert!((val / b - 1.0).abs() <= 0.15 + 1e-12);
            }
        }
    }

    #[test]
    fn heterogeneity_statistics() {
        let base = AgentParams::calibrated();
        let fleet = build_fleet(&base, 10_000, 2024, 0.05);
        let n = fleet.len() as f64;
        let mean = fleet.iter().map(|p| p.v_star).sum::<f64>() / n;
        let var = fleet.iter().map(|p| (p.v_star - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean / 10.49 - 1.0).abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() / (0.05 * 10.49) - 1.0).abs() < 0.10, "std {}", var.sqrt());
    }

    #[test]
    fn initial_state_is_even_and_at_rest() {
        let config = EpisodeConfig::default();
        let s = initialize(&config);
        let fleet = vec![AgentParams::calibrated(); 30];
        assert_abs_diff_eq!(s.states[1].x - s.states[0].x, 10.4667, epsilon = 1e-4);
        for i in 0..30 {
            assert_abs_diff_eq!(s.gap_ahead(i, &fleet), 6.5667, epsilon = 1e-4);
        }
        assert!(s.states.iter().all(|k| k.v == 0.0 && k.a == 0.0));
        assert!(s.prev_actions.iter().all(|&u| u == 0.0));
        assert_eq!(s.t, 0);

        let single = initialize(&EpisodeConfig::default().with_n(1));
        assert_eq!(single.states, vec![KinematicState::default()]);
    }

    #[test]
    fn kick_window() {
        let config = EpisodeConfig::default();
        assert_eq!(kick_override(&config, 12.0, 3.0), Some(-1.0));
        assert_eq!(kick_override(&config, 12.0, -0.01), Some(0.0));
        assert_eq!(kick_override(&config, 20.0, 3.0), None);
        assert_eq!(kick_override(&config, 30.0 * config.dt, 3.0), Some(-1.0));
        assert_eq!(kick_override(&config, 48.0 * config.dt, 3.0), None);
        assert_eq!(kick_override(&config.clone().without_kick(), 12.0, 3.0), None);
    }

    #[test]
    fn cav_activation_swaps_ideal_speed_only() {
        let config = EpisodeConfig::default().with_cavs(vec![1], 6.1);
        let fleet = build_fleet(&config.base_agent(), 30, 3, 0.05);
        let on = activate_cav(&fleet, &config).unwrap();
        assert_eq!(on[0].v_star, 6.1);
        assert_eq!(AgentParams { v_star: fleet[0].v_star, ..on[0] }, fleet[0]);
        assert_eq!(&on[1..], &fleet[1..]);
        assert_eq!(config.cav_on_step(), 150);

        let bad = EpisodeConfig::default().with_cavs(vec![31], 6.1);
        assert!(activate_cav(&fleet, &bad).is_err());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fig2_activation_step() {
        let mut config = EpisodeConfig::default().with_cavs(vec![1], 6.1);
        config.cav_on_time = 250.0;
        assert_eq!(config.cav_on_step(), 750);
    }

    #[test]
    fn empty_episode_holds_initial_state() {
        let mut config = EpisodeConfig::default().with_n(4);
        config.steps = 0;
        let rec = run_episode(&config).unwrap();
        assert!(rec.steps.is_empty());
        assert_eq!(rec.final_state, initialize(&config));
        assert_eq!(rec.states().count(), 1);
    }

    #[test]
    fn kick_is_an_action_override() {
        let mut config = EpisodeConfig::default().with_n(10);
        config.steps = 60;
        let rec = run_episode(&config).unwrap();
        for s in &rec.steps {
            let in_window = (30..48).contains(&s.t);
            if in_window && s.states[0].v > 0.0 {
                assert_eq!(s.applied[0], -1.0);
            } else if in_window {
                assert_eq!(s.applied[0], 0.0);
            }
        }
        assert!(rec.steps[29].applied[0] != -1.0);
    }

    #[test]
    fn episodes_are_reproducible() {
        let mut config = EpisodeConfig::default().with_n(12).with_cavs(vec![1], 5.0);
        config.steps = 400;
        config.noise_seed = 9;
        let a = run_episode(&config).unwrap();
        let b = run_episode(&config).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.final_state, b.final_state);
        config.noise_seed = 10;
        let c = run_episode(&config).unwrap();
        assert_ne!(a.final_state, c.final_state);
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(EpisodeConfig::default().with_n(0).validate().is_err());
        assert!(EpisodeConfig::default().with_n(90).validate().is_err());
        let mut c = EpisodeConfig::default();
        c.cav_indices = vec![1];
        assert!(c.validate().is_err());
        let mut c = EpisodeConfig::default();
        c.kick = KickSchedule { vehicle: 31, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
