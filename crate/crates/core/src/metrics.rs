//! System-level observables: fleet-average speed `V(t)`, speed range `R(t)`,
//! their long-run means over a measurement window, and flow phases.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::{KinematicState, TrafficState};
use crate::error::{Error, Result};
use crate::scenario::TrajectoryRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Free,
    Jammed,
    Suppressed,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Free => "free",
            Phase::Jammed => "jammed",
            Phase::Suppressed => "suppressed",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(Phase::Free),
            "jammed" => Ok(Phase::Jammed),
            "suppressed" => Ok(Phase::Suppressed),
            other => Err(Error::Data(format!("unknown phase `{other}`"))),
        }
    }
}

/// Cut-offs used by [`classify_phase`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseThresholds {
    /// Long-run speed range above which the flow is jammed (m/s).
    pub r_threshold: f64,
    /// Reference lower κ boundary (m/s).
    pub kappa_l_ref: f64,
    pub suppressed_fraction: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        PhaseThresholds {
            r_threshold: 3.0,
            kappa_l_ref: 2.5,
            suppressed_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub v_bar: f64,
    pub r_bar: f64,
    /// Vehicles per metre.
    pub density: f64,
    /// Vehicles per second.
    pub flow: f64,
    pub phase: Phase,
    pub collision_count: usize,
    /// Number of time steps averaged.
    pub samples: usize,
}

pub fn mean_speed(states: &[KinematicState]) -> f64 {
    states.iter().map(|s| s.v).sum::<f64>() / states.len() as f64
}

pub fn range_of_speeds(states: &[KinematicState]) -> f64 {
    let (lo, hi) = states
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.v), hi.max(s.v)));
    hi - lo
}

/// `V(t)`: arithmetic mean of all velocities.
pub fn average_speed(state: &TrafficState) -> f64 {
    mean_speed(&state.states)
}

/// `R(t)`: fastest minus slowest vehicle.
pub fn speed_range(state: &TrafficState) -> f64 {
    range_of_speeds(&state.states)
}

pub fn classify_phase(v_bar: f64, r_bar: f64, kappa: Option<f64>, th: &PhaseThresholds) -> Phase {
    if r_bar > th.r_threshold {
        return Phase::Jammed;
    }
    match kappa {
        Some(k) if k < th.kappa_l_ref && v_bar < th.suppressed_fraction * th.kappa_l_ref => Phase::Suppressed,
        _ => Phase::Free,
    }
}

/// Running time-average of `V(t)` and `R(t)` over steps whose time falls in
/// a closed window.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    window: (f64, f64),
    dt: f64,
    sum_v: f64,
    sum_r: f64,
    count: usize,
}

impl StatsAccumulator {
    pub fn new(window: (f64, f64), dt: f64) -> Self {
        StatsAccumulator {
            window,
            dt,
            sum_v: 0.0,
            sum_r: 0.0,
            count: 0,
        }
    }

    fn contains(&self, step: usize) -> bool {
        let t = step as f64 * self.dt;
        t >= self.window.0 - 1e-9 && t <= self.window.1 + 1e-9
    }

    pub fn push(&mut self, step: usize, states: &[KinematicState]) {
        if self.contains(step) {
            self.sum_v += mean_speed(states);
            self.sum_r += range_of_speeds(states);
            self.count += 1;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `(V̄, R̄)`, or `None` if no step fell inside the window.
    pub fn means(&self) -> Option<(f64, f64)> {
        (self.count > 0).then(|| (self.sum_v / self.count as f64, self.sum_r / self.count as f64))
    }

    pub fn finish(
        &self,
        n: usize,
        circumference: f64,
        kappa: Option<f64>,
        collision_count: usize,
        th: &PhaseThresholds,
    ) -> Result<EpisodeStats> {
        let (v_bar, r_bar) = self.means().ok_or_else(|| {
            Error::Config(format!(
                "measurement window [{}, {}] s contains no recorded step",
                self.window.0, self.window.1
            ))
        })?;
        let density = n as f64 / circumference;
        Ok(EpisodeStats {
            v_bar,
            r_bar,
            density,
            flow: density * v_bar,
            phase: classify_phase(v_bar, r_bar, kappa, th),
            collision_count,
            samples: self.count,
        })
    }
}

/// Time-averages over the recorded states (final state included) whose
/// time lies in `window`.
pub fn long_run_stats(record: &TrajectoryRecord, window: (f64, f64), th: &PhaseThresholds) -> Result<EpisodeStats> {
    let cfg = &record.config;
    let mut acc = StatsAccumulator::new(window, cfg.dt);
    for (t, states) in record.states() {
        acc.push(t, states);
    }
    let kappa = if cfg.cav_indices.is_empty() { None } else { cfg.kappa };
    acc.finish(cfg.n, cfg.circumference, kappa, record.collisions.len(), th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{run_episode, EpisodeConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn with_speeds(vs: &[f64]) -> TrafficState {
        TrafficState {
            t: 0,
            states: vs
                .iter()
                .enumerate()
                .map(|(i, &v)| KinematicState { x: i as f64 * 10.0, v, a: 0.0 })
                .collect(),
            prev_actions: vec![0.0; vs.len()],
            circumference: 314.0,
        }
    }

    #[test]
    fn speed_examples() {
        assert_eq!(average_speed(&with_speeds(&[5.0; 7])), 5.0);
        assert_eq!(average_speed(&with_speeds(&[0.0, 10.0])), 5.0);
        assert_eq!(speed_range(&with_speeds(&[4.0; 3])), 0.0);
        assert_eq!(speed_range(&with_speeds(&[2.0, 9.0, 4.0])), 7.0);
        assert_eq!(speed_range(&with_speeds(&[3.3])), 0.0);
    }

    #[test]
    fn phase_examples() {
        let th = PhaseThresholds::default();
        assert_eq!(classify_phase(5.0, 7.0, Some(6.0), &th), Phase::Jammed);
        assert_eq!(classify_phase(5.0, 7.0, None, &th), Phase::Jammed);
        assert_eq!(classify_phase(6.0, 0.5, Some(6.0), &th), Phase::Free);
        assert_eq!(classify_phase(1.0, 0.3, Some(1.0), &th), Phase::Suppressed);
        assert_eq!(classify_phase(9.0, 0.3, None, &th), Phase::Free);
    }

    #[test]
    fn phase_round_trips_through_text() {
        for p in [Phase::Free, Phase::Jammed, Phase::Suppressed] {
            assert_eq!(p.to_string().parse::<Phase>().unwrap(), p);
        }
        assert!("gridlock".parse::<Phase>().is_err());
    }

    #[test]
    fn constant_flow_stats() {
        // Noise-free homogeneous fleet cruising at v* with no kick.
        let mut cfg = EpisodeConfig::default().with_n(10).without_kick();
        cfg.agent = cfg.agent.noiseless();
        cfg.heterogeneity = 0.0;
        cfg.steps = 30;
        cfg.measure_window = (0.0, 10.0);
        let mut rec = run_episode(&cfg).unwrap();
        // Replace the trajectory with uniform motion at 7 m/s.
        for s in &mut rec.steps {
            for k in &mut s.states {
                k.v = 7.0;
            }
        }
        for k in &mut rec.final_state.states {
            k.v = 7.0;
        }
        let st = long_run_stats(&rec, (0.0, 10.0), &PhaseThresholds::default()).unwrap();
        assert_abs_diff_eq!(st.v_bar, 7.0, epsilon = 1e-12);
        assert_eq!(st.r_bar, 0.0);
        assert_abs_diff_eq!(st.density, 10.0 / 314.0);
        assert_abs_diff_eq!(st.flow, 7.0 * 10.0 / 314.0, epsilon = 1e-12);
        assert_eq!(st.samples, 31);
    }

    #[test]
    fn empty_window_is_an_error() {
        let mut cfg = EpisodeConfig::default().with_n(3);
        cfg.steps = 3;
        let rec = run_episode(&cfg).unwrap();
        assert!(long_run_stats(&rec, (200.0, 1000.0), &PhaseThresholds::default()).is_err());
    }

    proptest! {
        #[test]
        fn mean_matches_oracle(vs in prop::collection::vec(-1.0..15.0f64, 1..40)) {
            let oracle = vs.iter().sum::<f64>() / vs.len() as f64;
            prop_assert!((average_speed(&with_speeds(&vs)) - oracle).abs() < 1e-12);
        }

        #[test]
        fn range_is_nonnegative_and_label_free(mut vs in prop::collection::vec(-1.0..15.0f64, 1..40)) {
            let r = speed_range(&with_speeds(&vs));
            let v = average_speed(&with_speeds(&vs));
            prop_assert!(r >= 0.0);
            vs.reverse();
            prop_assert_eq!(speed_range(&with_speeds(&vs)), r);
            prop_assert!((average_speed(&with_speeds(&vs)) - v).abs() < 1e-12);
        }

        #[test]
        fn window_partition_is_linear(
            series in prop::collection::vec(prop::collection::vec(0.0..12.0f64, 3), 10..60),
            cut_frac in 0.1..0.9f64,
        ) {
            let dt = 1.0;
            let last = (series.len() - 1) as f64;
            let cut = (cut_frac * last).floor();
            let mut whole = StatsAccumulator::new((0.0, last), dt);
            let mut left = StatsAccumulator::new((0.0, cut), dt);
            let mut right = StatsAccumulator::new((cut + 1.0, last), dt);
            for (t, vs) in series.iter().enumerate() {
                let st = with_speeds(vs);
                whole.push(t, &st.states);
                left.push(t, &st.states);
                right.push(t, &st.states);
            }
            let (wv, wr) = whole.means().unwrap();
            let (lv, lr) = left.means().unwrap();
            let (rv, rr) = right.means().unwrap();
            let (nl, nr) = (left.count() as f64, right.count() as f64);
            prop_assert!((wv - (nl * lv + nr * rv) / (nl + nr)).abs() < 1e-9);
            prop_assert!((wr - (nl * lr + nr * rr) / (nl + nr)).abs() < 1e-9);
        }
    }
}
