use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Preference, noise and decision parameters of one driving agent.
///
/// Defaults are the fleet-average calibrated values for the ring-road
/// setting. Utility weights carry their sign: `w1 > 0` is a reward, `w2` and
/// `w3` are penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    /// Ideal speed (m/s).
    pub v_star: f64,
    /// Relative width of the forward reward.
    pub kappa1: f64,
    pub w1: f64,
    /// Backward-penalty rate (s/m).
    pub kappa2_v: f64,
    /// Backward-penalty offset (m/s).
    pub kappa2_0: f64,
    pub w2: f64,
    /// Collision scale constant (m).
    pub kappa3_c: f64,
    /// Collision speed scale (s).
    pub kappa3_v: f64,
    /// Closing-speed scale (s).
    pub kappa3_d: f64,
    pub w3: f64,
    /// Vehicle length (m).
    pub length: f64,
    pub sigma_x: f64,
    pub sigma_v: f64,
    pub sigma_a: f64,
    /// AR(1) coefficient of the realized acceleration.
    pub gamma: f64,
    /// Boltzmann inverse temperature.
    pub lambda: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub grid_points: usize,
    /// Anticipation horizon in steps; the rollout holds `horizon + 1` states.
    pub horizon: usize,
    /// Period length (s).
    pub dt: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self::calibrated()
    }
}

impl AgentParams {
    pub const fn calibrated() -> Self {
        AgentParams {
            v_star: 10.49,
            kappa1: 0.7,
            w1: 1.0,
            kappa2_v: 10.0,
            kappa2_0: 0.25,
            w2: -1.0,
            kappa3_c: 0.6,
            kappa3_v: 0.3,
            kappa3_d: 1.0,
            w3: -10.0,
            length: 3.9,
            sigma_x: 0.05,
            sigma_v: 0.1,
            sigma_a: 0.1,
            gamma: 0.7,
            lambda: 200.0,
            u_min: -6.0,
            u_max: 4.0,
            grid_points: 41,
            horizon: 3,
            dt: 1.0 / 3.0,
        }
    }

    /// Same agent with all state noise switched off.
    pub fn noiseless(mut self) -> Self {
        self.sigma_x = 0.0;
        self.sigma_v = 0.0;
        self.sigma_a = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Params(what.to_string()))
            }
        };
        check(self.v_star > 0.0, "v_star must be positive")?;
        check(self.kappa1 > 0.0, "kappa1 must be positive")?;
        check(
            self.sigma_x >= 0.0 && self.sigma_v >= 0.0 && self.sigma_a >= 0.0,
            "noise standard deviations must be non-negative",
        )?;
        check((0.0..1.0).contains(&self.gamma), "gamma must lie in [0, 1)")?;
        check(self.u_min < self.u_max, "u_min must be below u_max")?;
        check(self.grid_points >= 2, "action grid needs at least 2 points")?;
        check(self.dt > 0.0, "dt must be positive")?;
        check(self.length > 0.0, "vehicle length must be positive")?;
        check(self.lambda.is_finite(), "lambda must be finite")?;
        check(
            self.w1 > 0.0 && self.w2 < 0.0 && self.w3 < 0.0,
            "weights must satisfy w1 > 0, w2 < 0, w3 < 0",
        )?;
        Ok(())
    }

    /// Evenly spaced actions over `[u_min, u_max]`, both ends included.
    pub fn action_grid(&self) -> Vec<f64> {
        let n = self.grid_points;
        let span = self.u_max - self.u_min;
        (0..n)
            .map(|k| self.u_min + span * k as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn grid_spacing(&self) -> f64 {
        (self.u_max - self.u_min) / (self.grid_points - 1) as f64
    }
}
