use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

use manifest::{apply_set, ExperimentManifest};

/// Ring-road CAV experiments: single episodes, density scans, κ sweeps and
/// throughput/smoothness frontiers.
#[derive(Debug, Parser)]
#[command(name = "tamewave", version)]
struct Cli {
    /// TOML manifest; missing keys take the protocol defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "TAMEWAVE_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Noise seed (the first of a consecutive range for multi-run commands).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Manifest override, e.g. `--set episode.steps=900`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one episode and write its trajectory and long-run statistics.
    Simulate(SimulateArgs),
    /// Uncontrolled runs over a range of vehicle counts.
    TadakiScan(ScanArgs),
    /// Monte Carlo κ sweep, fitted response curves and κ* per ω.
    Sweep(SweepArgs),
    /// Efficient frontier over ω and improvement over the 0-CAV baseline.
    Frontier(FrontierArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Number of vehicles.
    #[arg(long)]
    n: Option<usize>,
    /// Run without the braking kick.
    #[arg(long)]
    no_kick: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    /// CAV ideal speed (m/s).
    #[arg(long)]
    kappa: Option<f64>,
    /// 1-based CAV vehicle numbers, comma separated.
    #[arg(long, value_delimiter = ',')]
    cavs: Option<Vec<usize>>,
    /// CAV activation time (s).
    #[arg(long)]
    cav_on_time: Option<f64>,
}

#[derive(Debug, Args)]
struct ScanArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    seeds_per_n: Option<usize>,
}

#[derive(Debug, Args)]
struct SweepOpts {
    #[arg(long)]
    cav_count: Option<usize>,
    /// Explicit κ values, comma separated.
    #[arg(long, value_delimiter = ',')]
    kappas: Option<Vec<f64>>,
    /// Seeds per κ.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sweep: SweepOpts,
    /// Weights ω for the κ* report, comma separated.
    #[arg(long, value_delimiter = ',')]
    omegas: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct FrontierArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    sweep: SweepOpts,
    /// ω grid, comma separated and ascending.
    #[arg(long, value_delimiter = ',')]
    omegas: Option<Vec<f64>>,
    /// Sweep summary from an earlier `sweep` run.
    #[arg(long)]
    sweep_summary: Option<PathBuf>,
    #[arg(long)]
    baseline_seeds: Option<usize>,
}

fn apply_common(m: &mut ExperimentManifest, c: &Common) {
    if let Some(n) = c.n {
        m.episode.n = n;
    }
    if c.no_kick {
        m.episode.kick.enabled = false;
    }
}

fn apply_sweep(m: &mut ExperimentManifest, s: &SweepOpts) {
    if let Some(c) = s.cav_count {
        m.sweep.cav_count = c;
    }
    if let Some(k) = &s.kappas {
        m.sweep.kappas = Some(k.clone());
    }
    if let Some(k) = s.seeds {
        m.sweep.seeds = k;
    }
    if let Some(h) = s.bandwidth {
        m.sweep.bandwidth = h;
    }
}

fn build_manifest(cli: &Cli) -> Result<ExperimentManifest> {
    let mut table = match &cli.config {
        Some(p) => ExperimentManifest::load(p)?,
        None => toml::Table::new(),
    };
    for s in &cli.sets {
        apply_set(&mut table, s)?;
    }
    let mut m = ExperimentManifest::from_table(table)?;
    if let Some(out) = &cli.out {
        m.output_dir = Some(out.clone());
    }
    if cli.jobs.is_some() {
        m.jobs = cli.jobs;
    }
    if let Some(seed) = cli.seed {
        m.episode.noise_seed = seed;
    }
    match &cli.command {
        Command::Simulate(a) => {
            apply_common(&mut m, &a.common);
            if let Some(s) = a.steps {
                m.episode.steps = s;
            }
            if let Some(k) = a.kappa {
                m.episode.kappa = Some(k);
            }
            if let Some(c) = &a.cavs {
                m.episode.cav_indices = c.clone();
            }
            if let Some(t) = a.cav_on_time {
                m.episode.cav_on_time = t;
            }
        }
        Command::TadakiScan(a) => {
            apply_common(&mut m, &a.common);
            if let Some(v) = a.n_min {
                m.tadaki_scan.n_min = v;
            }
            if let Some(v) = a.n_max {
                m.tadaki_scan.n_max = v;
            }
            if let Some(v) = a.seeds_per_n {
                m.tadaki_scan.seeds_per_n = v;
            }
        }
        Command::Sweep(a) => {
            apply_common(&mut m, &a.common);
            apply_sweep(&mut m, &a.sweep);
            if let Some(w) = &a.omegas {
                m.sweep.omegas = w.clone();
            }
        }
        Command::Frontier(a) => {
            apply_common(&mut m, &a.common);
            apply_sweep(&mut m, &a.sweep);
            if let Some(w) = &a.omegas {
                m.frontier.omegas = w.clone();
            }
            if let Some(p) = &a.sweep_summary {
                m.frontier.sweep_summary = Some(p.clone());
            }
            if let Some(k) = a.baseline_seeds {
                m.frontier.baseline_seeds = k;
            }
        }
    }
    if m.jobs == Some(0) {
        anyhow::bail!("configuration error: --jobs must be at least 1");
    }
    Ok(m)
}

fn run(cli: Cli) -> Result<()> {
    let manifest = build_manifest(&cli)?;
    let out = manifest.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let ctx = commands::Context::open(manifest, out)?;
    match cli.command {
        Command::Simulate(_) => commands::simulate(&ctx),
        Command::TadakiScan(_) => commands::tadaki_scan(&ctx),
        Command::Sweep(_) => commands::sweep(&ctx),
        Command::Frontier(_) => commands::frontier(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
