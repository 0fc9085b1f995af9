//! Policy search over the CAV ideal speed κ.
//!
//! A sweep runs the ring protocol for every (κ, noise seed) cell with one
//! frozen heterogeneous fleet, local linear regression smooths the per-κ
//! means into `V̄(κ)` and `R̄(κ)`, and the scalarized objective
//! `Π(κ) = V̄(κ) − ω·R̄(κ)` is maximized on a dense κ grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EpisodeStats, PhaseThresholds, StatsAccumulator};
use crate::params::AgentParams;
use crate::scenario::{build_fleet, simulate_with, EpisodeConfig};

/// Default smoothing bandwidth of the response curves (m/s).
pub const DEFAULT_BANDWIDTH: f64 = 0.5;
/// Default resolution of the κ* search (m/s).
pub const DEFAULT_KAPPA_STEP: f64 = 0.01;

/// 1-based vehicle numbers of `m` CAVs spread evenly over `n` vehicles,
/// starting at vehicle 1. Uses floor division, so two CAVs sit at
/// `1` and `1 + ⌊n/2⌋`.
pub fn place_cavs(n: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::Config(format!("cannot place {m} CAVs among {n} vehicles")));
    }
    let mut idx: Vec<usize> = (0..m).map(|k| 1 + k * n / m).collect();
    idx.dedup();
    Ok(idx)
}

/// Ascending grid `lo, lo + step, …` up to and including `hi` (within
/// rounding), with values rounded to 1e-9 so they print cleanly.
pub fn linear_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("bad grid [{lo}, {hi}] with step {step}")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=count)
        .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

/// Stats of one episode without keeping its trajectory.
pub fn episode_stats(config: &EpisodeConfig, fleet: &[AgentParams], th: &PhaseThresholds) -> Result<EpisodeStats> {
    let mut acc = StatsAccumulator::new(config.measure_window, config.dt);
    let (last, collisions) = simulate_with(config, fleet, |s, _| acc.push(s.t, &s.states))?;
    acc.push(last.t, &last.states);
    let kappa = if config.cav_indices.is_empty() { None } else { config.kappa };
    acc.finish(config.n, config.circumference, kappa, collisions.len(), th)
}

/// Runs independent episodes on `jobs` worker threads (all cores when
/// `None`). Output order follows `configs`, whatever the completion order.
pub fn run_batch(
    configs: &[EpisodeConfig],
    fleet: &[AgentParams],
    th: &PhaseThresholds,
    jobs: Option<usize>,
) -> Result<Vec<EpisodeStats>> {
    par_map(configs, jobs, |c| episode_stats(c, fleet, th))
}

/// Order-preserving parallel map on a pool of `jobs` threads (the global
/// pool when `None`, the calling thread when 1).
pub fn par_map<T, U, F>(items: &[T], jobs: Option<usize>, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    match jobs {
        Some(0) => Err(Error::Config("jobs must be at least 1".into())),
        Some(1) => items.iter().map(f).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(|| items.par_iter().map(&f).collect()),
        None => items.par_iter().map(f).collect(),
    }
}

/// Frozen fleet for a base configuration.
pub fn fleet_for(config: &EpisodeConfig) -> Vec<AgentParams> {
    build_fleet(&config.base_agent(), config.n, config.heterogeneity_seed, config.heterogeneity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    /// Template episode; its `n`, seeds and schedule apply to every cell.
    pub base: EpisodeConfig,
    pub cav_count: usize,
    pub kappa_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub thresholds: PhaseThresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub stats: EpisodeStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub kappa: f64,
    pub runs: Vec<SeedRun>,
    pub v_mean: f64,
    pub v_std: f64,
    pub r_mean: f64,
    pub r_std: f64,
}

impl SweepCell {
    pub fn new(kappa: f64, mut runs: Vec<SeedRun>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Data(format!("no runs for κ = {kappa}")));
        }
        runs.sort_by_key(|r| r.seed);
        let (v_mean, v_std) = mean_std(runs.iter().map(|r| r.stats.v_bar));
        let (r_mean, r_std) = mean_std(runs.iter().map(|r| r.stats.r_bar));
        Ok(SweepCell {
            kappa,
            runs,
            v_mean,
            v_std,
            r_mean,
            r_std,
        })
    }

    pub fn count(&self) -> usize {
        self.runs.len()
    }

    pub fn collisions(&self) -> usize {
        self.runs.iter().map(|r| r.stats.collision_count).sum()
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = if n > 1.0 {
        xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Scan results, one cell per κ in ascending order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub n: usize,
    pub cav_count: usize,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn new(n: usize, cav_count: usize, cells: Vec<SweepCell>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Data("sweep has no κ values".into()));
        }
        if cells.windows(2).any(|w| !(w[0].kappa < w[1].kappa)) {
            return Err(Error::Data("sweep κ values are not strictly ascending".into()));
        }
        Ok(SweepResult { n, cav_count, cells })
    }

    pub fn kappa_grid(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.kappa).collect()
    }

    pub fn collision_runs(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|c| &c.runs)
            .filter(|r| r.stats.collision_count > 0)
            .count()
    }
}

/// Runs every (κ, seed) cell of the plan with one shared fleet.
pub fn sweep_kappa(plan: &SweepPlan, jobs: Option<usize>) -> Result<SweepResult> {
    let base = &plan.base;
    if plan.kappa_grid.is_empty() {
        return Err(Error::Config("κ grid is empty".into()));
    }
    if plan.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    if plan.kappa_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("κ grid must be strictly ascending".into()));
    }
    let cavs = place_cavs(base.n, plan.cav_count)?;
    let fleet = fleet_for(base);

    let configs: Vec<EpisodeConfig> = plan
        .kappa_grid
        .iter()
        .flat_map(|&kappa| {
            let cavs = cavs.clone();
            plan.seeds.iter().map(move |&seed| EpisodeConfig {
                noise_seed: seed,
                cav_indices: cavs.clone(),
                kappa: Some(kappa),
                ..base.clone()
            })
        })
        .collect();
    let stats = run_batch(&configs, &fleet, &plan.thresholds, jobs)?;

    let per_kappa = plan.seeds.len();
    let cells = plan
        .kappa_grid
        .iter()
        .zip(stats.chunks(per_kappa))
        .map(|(&kappa, chunk)| {
            let runs = plan
                .seeds
                .iter()
                .zip(chunk)
                .map(|(&seed, &stats)| SeedRun { seed, stats })
                .collect();
            SweepCell::new(kappa, runs)
        })
        .collect::<Result<Vec<_>>>()?;
    let result = SweepResult::new(base.n, plan.cav_count, cells)?;
    let bad = result.collision_runs();
    if bad > 0 {
        log::warn!("{bad} sweep runs recorded collisions (N = {}, {} CAVs)", base.n, plan.cav_count);
    }
    Ok(result)
}

/// Per-N aggregate of a density scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub n: usize,
    pub density: f64,
    pub v_mean: f64,
    pub r_mean: f64,
    pub flow: f64,
    pub jammed_runs: usize,
    pub runs: usize,
    pub collisions: usize,
}

impl DensityRow {
    /// More than half of the seeds ended up jammed.
    pub fn jammed_majority(&self) -> bool {
        2 * self.jammed_runs > self.runs
    }
}

/// Uncontrolled runs for each vehicle count, `seeds` noise seeds each. The
/// fleet for `n` vehicles is the first `n` agents of one heterogeneity draw.
pub fn density_scan(
    base: &EpisodeConfig,
    ns: &[usize],
    seeds: &[u64],
    th: &PhaseThresholds,
    jobs: Option<usize>,
) -> Result<Vec<DensityRow>> {
    if ns.is_empty() || seeds.is_empty() {
        return Err(Error::Config("density scan needs at least one N and one seed".into()));
    }
    let mut jobs_list = Vec::with_capacity(ns.len() * seeds.len());
    for &n in ns {
        for &seed in seeds {
            jobs_list.push(EpisodeConfig {
                n,
                noise_seed: seed,
                cav_indices: Vec::new(),
                kappa: None,
                ..base.clone()
            });
        }
    }
    let max_n = ns.iter().copied().max().unwrap_or(0);
    let fleet = fleet_for(&base.clone().with_n(max_n));
    let stats = par_map(&jobs_list, jobs, |cfg| episode_stats(cfg, &fleet[..cfg.n], th))?;
    Ok(ns
        .iter()
        .zip(stats.chunks(seeds.len()))
        .map(|(&n, runs)| {
            let k = runs.len() as f64;
            let v_mean = runs.iter().map(|s| s.v_bar).sum::<f64>() / k;
            DensityRow {
                n,
                density: runs[0].density,
                v_mean,
                r_mean: runs.iter().map(|s| s.r_bar).sum::<f64>() / k,
                flow: runs[0].density * v_mean,
                jammed_runs: runs.iter().filter(|s| s.phase == crate::metrics::Phase::Jammed).count(),
                runs: runs.len(),
                collisions: runs.iter().map(|s| s.collision_count).sum(),
            }
        })
        .collect())
}

/// Smallest scanned N whose seeds are mostly jammed.
pub fn transition_n(rows: &[DensityRow]) -> Option<usize> {
    rows.iter().filter(|r| r.jammed_majority()).map(|r| r.n).min()
}

/// Local linear regression with a tricube kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
    bandwidth: f64,
}

fn tricube(d: f64) -> f64 {
    if d >= 1.0 {
        0.0
    } else {
        let t = 1.0 - d * d * d;
        t * t * t
    }
}

impl LocalLinear {
    /// `xs` must be strictly ascending, and consecutive points closer than
    /// `bandwidth` so every point of the domain sees at least two samples.
    pub fn fit(xs: Vec<f64>, ys: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Fit("x and y lengths differ".into()));
        }
        if xs.len() < 2 {
            return Err(Error::Fit("need at least two points".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::Fit(format!("bandwidth must be positive, got {bandwidth}")));
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Fit("x values must be strictly ascending".into()));
        }
        if let Some(w) = xs.windows(2).find(|w| w[1] - w[0] >= bandwidth) {
            return Err(Error::Fit(format!(
                "gap [{}, {}] is not narrower than bandwidth {bandwidth}",
                w[0], w[1]
            )));
        }
        Ok(LocalLinear { xs, ys, bandwidth })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn eval(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in self.xs.iter().zip(&self.ys) {
            let w = tricube((xi - x).abs() / h);
            if w == 0.0 {
                continue;
            }
            let dx = xi - x;
            sw += w;
            swx += w * dx;
            swy += w * yi;
            swxx += w * dx * dx;
            swxy += w * dx * yi;
        }
        let det = sw * swxx - swx * swx;
        if det.abs() <= 1e-12 * sw * swxx.max(f64::MIN_POSITIVE) {
            return swy / sw;
        }
        // Intercept of the weighted line centred at x.
        (swxx * swy - swx * swxy) / det
    }
}

/// Smoothed long-run means as functions of κ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurves {
    pub n: usize,
    pub cav_count: usize,
    pub v_fit: LocalLinear,
    pub r_fit: LocalLinear,
    /// RMS of per-κ means around the fitted V̄ and R̄ curves.
    pub v_residual: f64,
    pub r_residual: f64,
}

fn rms_residual(fit: &LocalLinear, xs: &[f64], ys: &[f64]) -> f64 {
    let ss: f64 = xs.iter().zip(ys).map(|(&x, &y)| (fit.eval(x) - y).powi(2)).sum();
    (ss / xs.len() as f64).sqrt()
}

impl ResponseCurves {
    pub fn from_points(
        n: usize,
        cav_count: usize,
        kappas: &[f64],
        v_means: &[f64],
        r_means: &[f64],
        bandwidth: f64,
    ) -> Result<Self> {
        if kappas.len() < 5 {
            return Err(Error::Fit(format!("need at least 5 κ values, got {}", kappas.len())));
        }
        let v_fit = LocalLinear::fit(kappas.to_vec(), v_means.to_vec(), bandwidth)?;
        let r_fit = LocalLinear::fit(kappas.to_vec(), r_means.to_vec(), bandwidth)?;
        Ok(ResponseCurves {
            n,
            cav_count,
            v_residual: rms_residual(&v_fit, kappas, v_means),
            r_residual: rms_residual(&r_fit, kappas, r_means),
            v_fit,
            r_fit,
        })
    }

    pub fn domain(&self) -> (f64, f64) {
        self.v_fit.domain()
    }

    pub fn bandwidth(&self) -> f64 {
        self.v_fit.bandwidth()
    }

    fn check(&self, kappa: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if kappa >= lo - 1e-9 && kappa <= hi + 1e-9 {
            Ok(())
        } else {
            Err(Error::Domain { kappa, lo, hi })
        }
    }

    pub fn v_bar(&self, kappa: f64) -> Result<f64> {
        self.check(kappa)?;
        Ok(self.v_fit.eval(kappa))
    }

    pub fn r_bar(&self, kappa: f64) -> Result<f64> {
        self.check(kappa)?;
        Ok(self.r_fit.eval(kappa))
    }

    /// Dense evaluation grid over the domain.
    pub fn grid(&self, step: f64) -> Vec<f64> {
        let (lo, hi) = self.domain();
        let mut g = linear_grid(lo, hi, step).unwrap_or_else(|_| vec![lo]);
        if hi - g[g.len() - 1] > 1e-9 {
            g.push(hi);
        }
        g
    }
}

pub fn fit_response_curves(sweep: &SweepResult, bandwidth: f64) -> Result<ResponseCurves> {
    let kappas = sweep.kappa_grid();
    let v: Vec<f64> = sweep.cells.iter().map(|c| c.v_mean).collect();
    let r: Vec<f64> = sweep.cells.iter().map(|c| c.r_mean).collect();
    ResponseCurves::from_points(sweep.n, sweep.cav_count, &kappas, &v, &r, bandwidth)
}

/// `Π(κ) = V̄(κ) − ω·R̄(κ)`.
pub fn objective(curves: &ResponseCurves, kappa: f64, omega: f64) -> Result<f64> {
    if !(omega >= 0.0) {
        return Err(Error::Config(format!("ω must be non-negative, got {omega}")));
    }
    Ok(curves.v_bar(kappa)? - omega * curves.r_bar(kappa)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPolicy {
    pub omega: f64,
    pub kappa_star: f64,
    /// Fitted `V̄(κ*)`.
    pub v_bar: f64,
    /// Fitted `R̄(κ*)`.
    pub r_bar: f64,
    pub n: usize,
    pub cav_count: usize,
}

pub fn optimize_kappa(curves: &ResponseCurves, omega: f64) -> Result<ControlPolicy> {
    optimize_kappa_on(curves, omega, DEFAULT_KAPPA_STEP)
}

/// Grid argmax of the objective; ties go to the larger κ.
pub fn optimize_kappa_on(curves: &ResponseCurves, omega: f64, step: f64) -> Result<ControlPolicy> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("κ search step must be positive, got {step}")));
    }
    let mut best: Option<(f64, f64)> = None;
    for kappa in curves.grid(step) {
        let value = objective(curves, kappa, omega)?;
        if best.is_none_or(|(_, b)| value >= b - 1e-12) {
            best = Some((kappa, value));
        }
    }
    let (kappa_star, _) = best.ok_or_else(|| Error::Fit("empty κ grid".into()))?;
    Ok(ControlPolicy {
        omega,
        kappa_star,
        v_bar: curves.v_bar(kappa_star)?,
        r_bar: curves.r_bar(kappa_star)?,
        n: curves.n,
        cav_count: curves.cav_count,
    })
}

/// One optimal policy per ω, in the order given (ω must be ascending).
pub fn efficient_frontier(curves: &ResponseCurves, omegas: &[f64]) -> Result<Vec<ControlPolicy>> {
    efficient_frontier_on(curves, omegas, DEFAULT_KAPPA_STEP)
}

pub fn efficient_frontier_on(curves: &ResponseCurves, omegas: &[f64], step: f64) -> Result<Vec<ControlPolicy>> {
    if omegas.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Config("ω grid must be ascending".into()));
    }
    omegas.iter().map(|&w| optimize_kappa_on(curves, w, step)).collect()
}

/// Relative change of `V̄` and `R̄` against an uncontrolled baseline, in
/// percent. Positive `v_pct` and negative `r_pct` are improvements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub v_pct: f64,
    pub r_pct: f64,
}

pub fn improvement_report(policy: &ControlPolicy, baseline: &EpisodeStats) -> Result<Improvement> {
    if baseline.v_bar == 0.0 || baseline.r_bar == 0.0 {
        return Err(Error::Data(format!(
            "baseline V̄ = {}, R̄ = {} cannot serve as a reference",
            baseline.v_bar, baseline.r_bar
        )));
    }
    Ok(Improvement {
        v_pct: 100.0 * (policy.v_bar - baseline.v_bar) / baseline.v_bar,
        r_pct: 100.0 * (policy.r_bar - baseline.r_bar) / baseline.r_bar,
    })
}

/// Averages `V̄`, `R̄` and flow over several runs of the same setting; the
/// phase is re-derived from the means.
pub fn mean_stats(runs: &[EpisodeStats], kappa: Option<f64>, th: &PhaseThresholds) -> Result<EpisodeStats> {
    let first = runs.first().ok_or_else(|| Error::Data("no runs to average".into()))?;
    let n = runs.len() as f64;
    let v_bar = runs.iter().map(|s| s.v_bar).sum::<f64>() / n;
    let r_bar = runs.iter().map(|s| s.r_bar).sum::<f64>() / n;
    Ok(EpisodeStats {
        v_bar,
        r_bar,
        density: first.density,
        flow: first.density * v_bar,
        phase: crate::metrics::classify_phase(v_bar, r_bar, kappa, th),
        collision_count: runs.iter().map(|s| s.collision_count).sum(),
        samples: runs.iter().map(|s| s.samples).sum(),
    })
}

/// Estimated κ boundaries between the three flow phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseBoundaries {
    /// Crossover from suppressed to free flow: the peak of `R̄` below
    /// `κ_H` minus one bandwidth.
    pub kappa_low: f64,
    /// Free-to-jammed transition: the steepest rise of `R̄`.
    pub kappa_high: f64,
}

pub fn phase_boundaries(curves: &ResponseCurves) -> Result<PhaseBoundaries> {
    let step = DEFAULT_KAPPA_STEP;
    let grid = curves.grid(step);
    if grid.len() < 3 {
        return Err(Error::Fit("κ domain too narrow to locate phases".into()));
    }
    let r: Vec<f64> = grid.iter().map(|&k| curves.r_fit.eval(k)).collect();

    let (rise_at, _) = r
        .windows(2)
        .enumerate()
        .map(|(i, w)| (i, w[1] - w[0]))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("grid has at least two points");
    let kappa_high = 0.5 * (grid[rise_at] + grid[rise_at + 1]);

    // The smoothed jump leaks up to one bandwidth below κ_H.
    let cutoff = kappa_high - curves.bandwidth();
    let peak = grid
        .iter()
        .zip(&r)
        .take_while(|(k, _)| **k <= cutoff)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| *k)
        .ok_or_else(|| Error::Fit(format!("no κ below {cutoff} to locate the lower boundary")))?;
    Ok(PhaseBoundaries {
        kappa_low: peak,
        kappa_high,
    })
}
