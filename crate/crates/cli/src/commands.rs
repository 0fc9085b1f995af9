use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context as _, Result};
use log::warn;
use tamewave::mechanism::{
    density_scan, efficient_frontier_on, fit_response_curves, fleet_for, improvement_report, mean_stats,
    optimize_kappa_on, phase_boundaries, run_batch, sweep_kappa, transition_n, SweepPlan, SweepResult,
};
use tamewave::{io, metrics, scenario, EpisodeConfig, Error};

use crate::manifest::ExperimentManifest;

pub struct Context {
    pub manifest: ExperimentManifest,
    pub out: PathBuf,
    pub digest: String,
    started: Instant,
}

impl Context {
    /// Creates the output directory and stores the effective manifest in it.
    pub fn open(manifest: ExperimentManifest, out: PathBuf) -> Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let digest = manifest.digest()?;
        let stripped = ExperimentManifest {
            output_dir: None,
            jobs: None,
            ..manifest.clone()
        };
        fs::write(out.join("manifest.toml"), stripped.to_toml()?)?;
        Ok(Context {
            manifest,
            out,
            digest,
            started: Instant::now(),
        })
    }

    fn jobs(&self) -> Option<usize> {
        self.manifest.jobs
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.out.join(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(f))
    }

    /// Appends a timestamped line to `run.log`, the only file whose content
    /// varies between identical runs.
    fn log_run(&self, command: &str, files: &[&str]) -> Result<()> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut f = OpenOptions::new().create(true).append(true).open(self.out.join("run.log"))?;
        writeln!(
            f,
            "unix_time={now} command={command} digest={} elapsed_s={:.3} files={}",
            self.digest,
            self.started.elapsed().as_secs_f64(),
            files.join(",")
        )?;
        Ok(())
    }
}

fn config_error(e: Error) -> anyhow::Error {
    match e {
        Error::Config(msg) => anyhow::anyhow!("configuration error: {msg}"),
        other => other.into(),
    }
}

pub fn simulate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.manifest.episode;
    let record = scenario::run_episode(cfg).map_err(config_error)?;
    let mut files = vec!["trajectory.csv"];
    io::write_trajectory(&record, &ctx.digest, ctx.create("trajectory.csv")?)?;
    match metrics::long_run_stats(&record, cfg.measure_window, &ctx.manifest.thresholds) {
        Ok(stats) => {
            io::write_stats(&stats, cfg.n, &ctx.digest, ctx.create("stats.csv")?)?;
            files.push("stats.csv");
            println!(
                "N={} V_bar={:.4} R_bar={:.4} flow={:.4} phase={} collisions={}",
                cfg.n, stats.v_bar, stats.r_bar, stats.flow, stats.phase, stats.collision_count
            );
        }
        Err(Error::Config(msg)) => {
            // Short smoke runs end before the measurement window opens.
            warn!("{msg}; stats.csv not written");
            let stale = ctx.out.join("stats.csv");
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
        Err(e) => return Err(e.into()),
    }
    if !record.collisions.is_empty() {
        warn!("{} collision events", record.collisions.len());
    }
    ctx.log_run("simulate", &files)
}

pub fn tadaki_scan(ctx: &Context) -> Result<()> {
    let m = &ctx.manifest;
    let scan = &m.tadaki_scan;
    if scan.n_min == 0 || scan.n_min > scan.n_max {
        bail!("configuration error: N range {}..={} is empty", scan.n_min, scan.n_max);
    }
    let ns: Vec<usize> = (scan.n_min..=scan.n_max).collect();
    let seeds = m.seeds(scan.seeds_per_n);
    let rows = density_scan(&m.episode, &ns, &seeds, &m.thresholds, ctx.jobs()).map_err(config_error)?;
    io::write_density_table(&rows, &ctx.digest, ctx.create("tadaki_scan.csv")?)?;
    for r in &rows {
        println!(
            "N={:>3} density={:.4} V_bar={:.3} R_bar={:.3} flow={:.4} jammed={}/{}",
            r.n, r.density, r.v_mean, r.r_mean, r.flow, r.jammed_runs, r.runs
        );
    }
    match transition_n(&rows) {
        Some(n) => println!("transition: N={n}"),
        None => println!("transition: none in scanned range"),
    }
    ctx.log_run("tadaki-scan", &["tadaki_scan.csv"])
}

fn sweep_plan(m: &ExperimentManifest) -> Result<SweepPlan> {
    Ok(SweepPlan {
        base: m.episode.clone(),
        cav_count: m.sweep.cav_count,
        kappa_grid: m.sweep.kappa_grid()?,
        seeds: m.seeds(m.sweep.seeds),
        thresholds: m.thresholds,
    })
}

fn write_sweep_files(ctx: &Context, sweep: &SweepResult) -> Result<()> {
    io::write_sweep_summary(sweep, &ctx.digest, ctx.create("sweep_summary.csv")?)?;
    io::write_sweep_cells(sweep, &ctx.digest, ctx.create("sweep_cells.csv")?)?;
    Ok(())
}

pub fn sweep(ctx: &Context) -> Result<()> {
    let m = &ctx.manifest;
    let plan = sweep_plan(m)?;
    let sweep = sweep_kappa(&plan, ctx.jobs()).map_err(config_error)?;
    write_sweep_files(ctx, &sweep)?;
    let mut files = vec!["sweep_summary.csv", "sweep_cells.csv"];

    let curves = match fit_response_curves(&sweep, m.sweep.bandwidth) {
        Ok(c) => c,
        Err(e) => {
            warn!("curves not fitted: {e}");
            return ctx.log_run("sweep", &files);
        }
    };
    io::write_curves(&curves, m.sweep.search_step, &ctx.digest, ctx.create("curves.csv")?)?;
    files.push("curves.csv");
    let policies = m
        .sweep
        .omegas
        .iter()
        .map(|&w| optimize_kappa_on(&curves, w, m.sweep.search_step))
        .collect::<tamewave::Result<Vec<_>>>()
        .map_err(config_error)?;
    io::write_frontier(&policies, &ctx.digest, ctx.create("kappa_star.csv")?)?;
    files.push("kappa_star.csv");
    for p in &policies {
        println!(
            "omega={} kappa_star={:.2} V_bar={:.4} R_bar={:.4}",
            p.omega, p.kappa_star, p.v_bar, p.r_bar
        );
    }
    match phase_boundaries(&curves) {
        Ok(b) => {
            io::write_boundaries(&b, &ctx.digest, ctx.create("boundaries.csv")?)?;
            files.push("boundaries.csv");
            println!("kappa_L={:.2} kappa_H={:.2}", b.kappa_low, b.kappa_high);
        }
        Err(e) => warn!("phase boundaries not located: {e}"),
    }
    if sweep.collision_runs() > 0 {
        warn!("{} runs with collisions", sweep.collision_runs());
    }
    ctx.log_run("sweep", &files)
}

fn load_or_run_sweep(ctx: &Context) -> Result<SweepResult> {
    let m = &ctx.manifest;
    match &m.frontier.sweep_summary {
        Some(path) => read_summary(path, m),
        None => {
            let sweep = sweep_kappa(&sweep_plan(m)?, ctx.jobs()).map_err(config_error)?;
            write_sweep_files(ctx, &sweep)?;
            Ok(sweep)
        }
    }
}

fn read_summary(path: &Path, m: &ExperimentManifest) -> Result<SweepResult> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    io::read_sweep_summary(f, m.episode.n, m.sweep.cav_count, m.episode.circumference)
        .with_context(|| format!("reading {}", path.display()))
}

pub fn frontier(ctx: &Context) -> Result<()> {
    let m = &ctx.manifest;
    if m.frontier.baseline_seeds == 0 {
        bail!("configuration error: frontier needs a 0-CAV baseline (frontier.baseline_seeds > 0)");
    }
    let sweep = load_or_run_sweep(ctx)?;
    let curves = fit_response_curves(&sweep, m.sweep.bandwidth)?;
    let policies = efficient_frontier_on(&curves, &m.frontier.omegas, m.sweep.search_step).map_err(config_error)?;

    let base = EpisodeConfig {
        cav_indices: Vec::new(),
        kappa: None,
        ..m.episode.clone()
    };
    let configs: Vec<EpisodeConfig> = m
        .seeds(m.frontier.baseline_seeds)
        .into_iter()
        .map(|seed| EpisodeConfig {
            noise_seed: seed,
            ..base.clone()
        })
        .collect();
    let runs = run_batch(&configs, &fleet_for(&base), &m.thresholds, ctx.jobs()).map_err(config_error)?;
    let baseline = mean_stats(&runs, None, &m.thresholds)?;

    let rows = policies
        .iter()
        .map(|p| improvement_report(p, &baseline).map(|imp| (*p, imp)))
        .collect::<tamewave::Result<Vec<_>>>()?;
    io::write_frontier(&policies, &ctx.digest, ctx.create("frontier.csv")?)?;
    io::write_improvements(&rows, &baseline, &ctx.digest, ctx.create("improvements.csv")?)?;
    println!("baseline: V_bar={:.4} R_bar={:.4}", baseline.v_bar, baseline.r_bar);
    for (p, imp) in &rows {
        println!(
            "omega={} kappa_star={:.2} V_bar={:.4} ({:+.1}%) R_bar={:.4} ({:+.1}%)",
            p.omega, p.kappa_star, p.v_bar, imp.v_pct, p.r_bar, imp.r_pct
        );
    }
    let mut files = vec!["frontier.csv", "improvements.csv"];
    if m.frontier.sweep_summary.is_none() {
        files.extend(["sweep_summary.csv", "sweep_cells.csv"]);
    }
    ctx.log_run("frontier", &files)
}
